"""`penn-mpc train`: fit the ensemble on a collected dataset and report held-out RMSE."""

from __future__ import annotations

import logging
from pathlib import Path

from pennmpc.commands.common import load_split, prepare_output, require_data_dir, write_csv, write_eval_report
from pennmpc.models.domain import SampleBatch
from pennmpc.models.schemas import EpochMetrics, EvalReport, ExperimentConfig, TrainConfig
from pennmpc.services.penn_dynamics import TrainingResult, evaluate_rmse, init_model, save_checkpoint, train

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt.json"
METRICS_COLUMNS = ("epoch", "train_loss", "rmse_total", "rmse_vx", "rmse_vy", "rmse_r")


def fit(cfg: ExperimentConfig, H: int, train_set: SampleBatch, test_set: SampleBatch, dt: float,
        train_cfg: TrainConfig | None = None) -> tuple[TrainingResult, EvalReport]:
    """Fresh model at history length H, trained and scored on the test split."""
    model_cfg = cfg.model.model_copy(update={"H": H})
    train_cfg = train_cfg or cfg.train
    model = init_model(model_cfg, seed=train_cfg.seed, dt=dt)
    result = train(model, train_set, test_set, train_cfg)
    return result, evaluate_rmse(result.best_model, test_set)


def write_metrics(path: Path, history: list[EpochMetrics]) -> None:
    write_csv(
        path,
        METRICS_COLUMNS,
        ((m.epoch, m.train_loss, m.rmse_total, m.rmse_vx, m.rmse_vy, m.rmse_r) for m in history),
    )


def cmd_train(cfg: ExperimentConfig) -> EvalReport:
    out = prepare_output(cfg, "train")
    data_dir = require_data_dir(cfg)
    H = cfg.model.H
    train_set, test_set, manifest = load_split(data_dir, H, cfg)
    if manifest.H is not None and manifest.H != H:
        logger.warning("Dataset %s was collected for H=%d; windowing at model.H=%d", data_dir, manifest.H, H)
    logger.info("Training %s ensemble, H=%d: %d train / %d test samples", cfg.model.mode, H, len(train_set), len(test_set))

    result, report = fit(cfg, H, train_set, test_set, manifest.dt)
    save_checkpoint(result.best_model, out / CHECKPOINT_NAME)
    write_metrics(out / "metrics.csv", result.history)
    write_eval_report(out, report)
    logger.info("Best epoch %d/%d\n%s", result.best_epoch, cfg.train.epochs, report.to_text())
    return report
