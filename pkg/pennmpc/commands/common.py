"""Helpers shared by every experiment command: output directories, run manifests, seeds and CSV output."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Any, Iterable, Sequence, Union

import numpy as np
import pydantic

from pennmpc import __version__
from pennmpc.config import config_hash, dump_config
from pennmpc.errors import ConfigError
from pennmpc.models.domain import SampleBatch
from pennmpc.models.schemas import DatasetManifest, EvalReport, ExperimentConfig, RunManifest
from pennmpc.services.dataset_store import SplitDataset, load_dataset, split, stack_samples, window_episodes
from pennmpc.sim.track import Track, build_track

logger = logging.getLogger(__name__)

RUN_MANIFEST_NAME = "run_manifest.json"
EFFECTIVE_CONFIG_NAME = "config.effective"
FAILED_NAME = "FAILED"


def derive_seed(*parts: int) -> int:
    """A 32-bit seed for an independent stream keyed by `parts`."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def prepare_output(cfg: ExperimentConfig, command: str) -> Path:
    """Create the output directory and record what is about to run."""
    out = Path(cfg.io.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stale = out / FAILED_NAME
    if stale.exists():
        stale.unlink()
    manifest = RunManifest(
        command=command,
        config_hash=config_hash(cfg),
        seed=cfg.seed,
        versions={"penn-mpc": __version__, "numpy": np.__version__, "pydantic": pydantic.VERSION},
    )
    (out / RUN_MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2) + "\n")
    (out / EFFECTIVE_CONFIG_NAME).write_text(dump_config(cfg))
    return out


def write_failed(out: Union[str, Path], message: str) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / FAILED_NAME).write_text(message.rstrip() + "\n")


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _cell(v: Any) -> str:
    if isinstance(v, bool) or v is None:
        return "" if v is None else str(v).lower()
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def write_eval_report(out: Path, report: EvalReport, stem: str = "eval_report") -> None:
    (out / f"{stem}.txt").write_text(report.to_text() + "\n")
    write_csv(out / f"{stem}.csv", ("metric", "rmse", "unit"), report.as_rows())


def desk_track(cfg: ExperimentConfig) -> Track:
    return build_track(cfg.track)


def require_data_dir(cfg: ExperimentConfig) -> Path:
    if not cfg.io.data_dir:
        raise ConfigError("io.data_dir is not set; point it at a dataset written by `collect`")
    return Path(cfg.io.data_dir)


def require_checkpoint(cfg: ExperimentConfig) -> Path:
    if not cfg.io.checkpoint:
        raise ConfigError("io.checkpoint is not set; point it at a model.ckpt.json written by `train`")
    return Path(cfg.io.checkpoint)


def load_split(directory: Union[str, Path], H: int, cfg: ExperimentConfig) -> tuple[SampleBatch, SampleBatch, DatasetManifest]:
    """Window a stored dataset at H and split it with the training ratio and seed."""
    episodes, manifest = load_dataset(directory)
    parts: SplitDataset = split(window_episodes(episodes, H), cfg.train.split_ratio, cfg.train.seed)
    return stack_samples(parts.train), stack_samples(parts.test), manifest
