"""Dataset store: episode persistence, history windowing, splitting and normalisation.

Episodes are stored as one CSV per run plus a `manifest.json` sidecar that
records tags, seeds and (optionally) the history length the data was windowed
at. Targets stay in raw units on disk; normalisation happens at train time.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from pydantic import ValidationError

from pennmpc.errors import DatasetError, SchemaError
from pennmpc.models.domain import (
    ACTION_DIM,
    STATE_DIM,
    EpisodeLog,
    HistoryWindow,
    NormStats,
    SampleBatch,
    flatten_windows,
)
from pennmpc.models.schemas import DatasetManifest, EpisodeEntry

logger = logging.getLogger(__name__)

EPISODE_COLUMNS = ("t", "vx", "vy", "r", "steer", "throttle", "x", "y", "yaw")
MANIFEST_NAME = "manifest.json"
MIN_SPLIT_SAMPLES = 10


@dataclass(frozen=True)
class Sample:
    window: HistoryWindow
    target: np.ndarray  # next state - last window state, raw units
    episode_id: int
    t_index: int  # row of the last window entry


@dataclass(frozen=True)
class SplitDataset:
    train: list[Sample]
    test: list[Sample]
    ratio: float
    seed: int


# =====================================================================
# Windowing
# =====================================================================


def window_episodes(episodes: Sequence[EpisodeLog], H: int) -> list[Sample]:
    """Slide an H-long window over every episode; no window crosses an episode boundary."""
    samples: list[Sample] = []
    for episode_id, ep in enumerate(episodes):
        L = len(ep)
        if L < H + 1:
            logger.warning("Skipping episode %d (%s): %d rows is shorter than H+1=%d", episode_id, ep.tag, L, H + 1)
            continue
        for j in range(L - H):
            last = j + H - 1
            samples.append(
                Sample(
                    window=HistoryWindow(ep.states[j : j + H], ep.actions[j : j + H], ep.dt),
                    target=ep.states[last + 1] - ep.states[last],
                    episode_id=episode_id,
                    t_index=last,
                )
            )
    return samples


def stack_samples(samples: Sequence[Sample]) -> SampleBatch:
    if not samples:
        raise DatasetError("cannot stack an empty sample list")
    return SampleBatch(
        np.stack([s.window.states for s in samples]),
        np.stack([s.window.actions for s in samples]),
        np.stack([s.target for s in samples]),
    )


def split(samples: Sequence[Sample], ratio: float = 0.7, seed: int = 0) -> SplitDataset:
    """Sample-level shuffle with `seed`, then a prefix split."""
    n = len(samples)
    if n < MIN_SPLIT_SAMPLES:
        raise DatasetError(f"need at least {MIN_SPLIT_SAMPLES} samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratio * n))
    return SplitDataset(
        train=[samples[i] for i in order[:n_train]],
        test=[samples[i] for i in order[n_train:]],
        ratio=ratio,
        seed=seed,
    )


def compute_norm_stats(train: Union[Sequence[Sample], SampleBatch]) -> NormStats:
    """Per-coordinate mean/std over the training samples only, std floored."""
    batch = train if isinstance(train, SampleBatch) else stack_samples(train)
    if len(batch) == 0:
        raise DatasetError("cannot compute statistics of an empty training set")
    features = flatten_windows(batch.states, batch.actions)
    floor = NormStats.STD_FLOOR
    return NormStats(
        input_mean=features.mean(axis=0),
        input_std=np.maximum(features.std(axis=0), floor),
        target_mean=batch.targets.mean(axis=0),
        target_std=np.maximum(batch.targets.std(axis=0), floor),
    )


# =====================================================================
# Episode CSV
# =====================================================================


def write_episode_csv(path: Union[str, Path], log: EpisodeLog) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EPISODE_COLUMNS)
        for i in range(len(log)):
            row = [log.t[i], *log.states[i], *log.actions[i], *log.poses[i]]
            writer.writerow([f"{float(v):.9g}" for v in row])


def read_episode_csv(path: Union[str, Path], **meta) -> EpisodeLog:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != EPISODE_COLUMNS:
            raise SchemaError(f"{path}: expected columns {','.join(EPISODE_COLUMNS)}, got {header}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(EPISODE_COLUMNS):
                raise DatasetError(f"{path}:{line_no}: expected {len(EPISODE_COLUMNS)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DatasetError(f"{path}:{line_no}: {exc}") from exc

    data = np.array(rows, dtype=np.float64).reshape(-1, len(EPISODE_COLUMNS))
    return EpisodeLog(
        t=data[:, 0],
        states=data[:, 1 : 1 + STATE_DIM],
        actions=data[:, 1 + STATE_DIM : 1 + STATE_DIM + ACTION_DIM],
        poses=data[:, 1 + STATE_DIM + ACTION_DIM :],
        **meta,
    )


# =====================================================================
# Dataset directories
# =====================================================================


def _entry_for(file_name: str, log: EpisodeLog) -> EpisodeEntry:
    return EpisodeEntry(
        file=file_name,
        tag=log.tag,
        direction=log.direction,
        seed=log.seed,
        duration=round(log.duration, 9),
        rows=len(log),
        truncated=log.truncated,
    )


def save_dataset(directory: Union[str, Path], episodes: Sequence[EpisodeLog], H: int | None = None,
                 dt: float = 0.1) -> DatasetManifest:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, log in enumerate(episodes):
        name = f"episode_{i:04d}.csv"
        write_episode_csv(directory / name, log)
        entries.append(_entry_for(name, log))
    manifest = DatasetManifest(dt=dt, H=H, episodes=entries)
    (directory / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2) + "\n")
    logger.info("Saved %d episodes (%d rows) to %s", len(entries), sum(e.rows for e in entries), directory)
    return manifest


def append_episode(directory: Union[str, Path], log: EpisodeLog, dt: float = 0.1) -> DatasetManifest:
    directory = Path(directory)
    manifest = read_manifest(directory) if (directory / MANIFEST_NAME).exists() else DatasetManifest(dt=dt)
    directory.mkdir(parents=True, exist_ok=True)
    name = f"episode_{len(manifest.episodes):04d}.csv"
    write_episode_csv(directory / name, log)
    manifest.episodes.append(_entry_for(name, log))
    (directory / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2) + "\n")
    return manifest


def read_manifest(directory: Union[str, Path]) -> DatasetManifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"no {MANIFEST_NAME} in {directory}")
    try:
        return DatasetManifest.model_validate_json(path.read_text())
    except ValidationError as exc:
        raise SchemaError(f"{path}: invalid manifest: {exc.errors()[0]['msg']}") from exc


def load_dataset(directory: Union[str, Path]) -> tuple[list[EpisodeLog], DatasetManifest]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    episodes = [
        read_episode_csv(
            directory / e.file,
            tag=e.tag,
            direction=e.direction,
            seed=e.seed,
            truncated=e.truncated,
            dt=manifest.dt,
        )
        for e in manifest.episodes
    ]
    return episodes, manifest


def load_samples(directory: Union[str, Path], H: int | None = None) -> list[Sample]:
    """Window a stored dataset at `H`, defaulting to the H recorded in its manifest."""
    episodes, manifest = load_dataset(directory)
    H = H if H is not None else manifest.H
    if H is None:
        raise DatasetError(f"{directory}: manifest records no H and none was given")
    return window_episodes(episodes, H)


def truncate_dataset(directory: Union[str, Path], n_episodes: int) -> DatasetManifest:
    """Forget every episode after the first `n_episodes`; their CSVs are removed."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    if n_episodes > len(manifest.episodes):
        raise DatasetError(f"{directory} holds {len(manifest.episodes)} episodes, cannot keep {n_episodes}")
    for entry in manifest.episodes[n_episodes:]:
        (directory / entry.file).unlink(missing_ok=True)
        logger.warning("Dropping episode %s from %s", entry.file, directory)
    manifest.episodes = manifest.episodes[:n_episodes]
    (directory / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2) + "\n")
    return manifest
