"""`penn-mpc collect`: scripted maneuver data on the desk track."""

from __future__ import annotations

import logging
import math
from pathlib import Path

from pennmpc.commands.common import derive_seed, desk_track, prepare_output
from pennmpc.models.domain import EpisodeLog
from pennmpc.models.schemas import DatasetManifest, ExperimentConfig
from pennmpc.services.dataset_store import save_dataset
from pennmpc.sim.maneuvers import scripted_maneuver
from pennmpc.sim.track import Track, save_track_csv

logger = logging.getLogger(__name__)

DATASET_DIR = "dataset"
DIRECTIONS = ("ccw", "cw")


def collect_episodes(cfg: ExperimentConfig, minutes: float, seed: int, track: Track) -> list[EpisodeLog]:
    """Round-robin over (maneuver, direction) pairs until `minutes` of driving are scheduled."""
    total = minutes * 60.0
    schedule = [(kind, d) for kind in cfg.collect.mix for d in DIRECTIONS]
    n_episodes = max(1, math.ceil(total / cfg.collect.episode_seconds - 1e-9))
    episodes = []
    for i in range(n_episodes):
        kind, direction = schedule[i % len(schedule)]
        duration = min(cfg.collect.episode_seconds, total - i * cfg.collect.episode_seconds)
        episodes.append(scripted_maneuver(kind, duration, direction, derive_seed(seed, i), track, cfg.plant))
    return episodes


def cmd_collect(cfg: ExperimentConfig) -> DatasetManifest:
    out = prepare_output(cfg, "collect")
    track = desk_track(cfg)
    save_track_csv(out / "track.csv", track)

    episodes = collect_episodes(cfg, cfg.collect.minutes, cfg.seed, track)
    manifest = save_dataset(Path(out) / DATASET_DIR, episodes, H=cfg.model.H, dt=cfg.plant.dt)

    rows = sum(e.rows for e in manifest.episodes)
    expected = int(round(cfg.collect.minutes * 60.0 / cfg.plant.dt))
    truncated = sum(e.truncated for e in manifest.episodes)
    logger.info("Collected %d rows (%d scheduled), %d of %d episodes truncated", rows, expected, truncated, len(episodes))
    return manifest
