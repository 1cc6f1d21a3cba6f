"""`penn-mpc eval`: one-step RMSE of a checkpoint on a stored dataset."""

from __future__ import annotations

import logging
from typing import Literal

from pennmpc.commands.common import (
    load_split,
    prepare_output,
    require_checkpoint,
    require_data_dir,
    write_eval_report,
)
from pennmpc.errors import ShapeError
from pennmpc.models.schemas import EvalReport, ExperimentConfig
from pennmpc.services.dataset_store import load_dataset, read_manifest, stack_samples, window_episodes
from pennmpc.services.penn_dynamics import evaluate_rmse, load_checkpoint

logger = logging.getLogger(__name__)


def cmd_eval(cfg: ExperimentConfig, split: Literal["test", "all"] = "test") -> EvalReport:
    """`test` re-creates the training split (same ratio and seed), so a fresh checkpoint reproduces its train report."""
    out = prepare_output(cfg, "eval")
    ckpt = require_checkpoint(cfg)
    data_dir = require_data_dir(cfg)
    model = load_checkpoint(ckpt)
    manifest = read_manifest(data_dir)
    if manifest.H is not None and manifest.H != model.H:
        raise ShapeError(f"checkpoint {ckpt} has H={model.H} but dataset {data_dir} was collected for H={manifest.H}")

    if split == "test":
        _, dataset, _ = load_split(data_dir, model.H, cfg)
    else:
        episodes, _ = load_dataset(data_dir)
        dataset = stack_samples(window_episodes(episodes, model.H))
    report = evaluate_rmse(model, dataset)
    write_eval_report(out, report)
    logger.info("%s split of %s\n%s", split, data_dir, report.to_text())
    return report
