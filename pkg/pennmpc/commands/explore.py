"""`penn-mpc explore`: grow a dataset by driving where the ensemble disagrees, retraining after every round.

Per round:
  1. load the previous round's checkpoint (the pre-round model)
  2. drive `steps_per_round` plant steps with MPPI in explore mode (or uniform random actions)
  3. append the episode to the on-disk buffer and retrain from the whole buffer
  4. score the new model on a held-out scripted-maneuver set

Progress lives in `explore_state.json`; rerunning the command resumes after the last finished round.
"""

from __future__ import annotations

import logging
import shutil
from pathlib import Path

import numpy as np

from pennmpc.commands.collect import collect_episodes
from pennmpc.commands.common import derive_seed, desk_track, load_split, prepare_output, write_csv
from pennmpc.commands.train import fit
from pennmpc.errors import ConfigError
from pennmpc.models.domain import Action, HistoryWindow
from pennmpc.models.schemas import ExperimentConfig, ExploreState, LearningCurveRow
from pennmpc.services.dataset_store import (
    MANIFEST_NAME,
    append_episode,
    load_samples,
    read_manifest,
    save_dataset,
    stack_samples,
    truncate_dataset,
)
from pennmpc.services.mppi_controller import EXPLORE, ControllerState, CostSpec, mpc_step
from pennmpc.services.penn_dynamics import PennModel, evaluate_rmse, load_checkpoint, save_checkpoint, window_jrd
from pennmpc.sim.maneuvers import run_episode, start_state
from pennmpc.sim.plant import PlantState
from pennmpc.sim.track import Track

logger = logging.getLogger(__name__)

BUFFER_DIR = "buffer"
EVAL_DIR = "eval_set"
STATE_NAME = "explore_state.json"
CURVE_COLUMNS = ("round", "cumulative_steps", "rmse_total", "rmse_vx", "rmse_vy", "rmse_r", "mean_jrd_pre")


def round_checkpoint(out: Path, r: int) -> Path:
    return out / f"model_round_{r:02d}.ckpt.json"


def _random_start(track: Track, rng: np.random.Generator, speed: float) -> PlantState:
    return start_state(track, float(rng.uniform(0.0, track.total_length)), speed)


def _retrain(cfg: ExperimentConfig, out: Path, r: int) -> PennModel:
    train_set, test_set, manifest = load_split(out / BUFFER_DIR, cfg.model.H, cfg)
    train_cfg = cfg.train.model_copy(update={"epochs": cfg.explore.retrain_epochs})
    result, report = fit(cfg, cfg.model.H, train_set, test_set, manifest.dt, train_cfg)
    path = round_checkpoint(out, r)
    save_checkpoint(result.best_model, path)
    logger.info("Round %d model: %d buffer samples, split RMSE %.5f", r, len(train_set) + len(test_set), report.rmse_total)
    return load_checkpoint(path)


def run_round(cfg: ExperimentConfig, model: PennModel, track: Track, r: int, policy: str, n_steps: int):
    """Drive the plant for one round; returns the episode and the pre-round JRD of every executed step."""
    start = _random_start(track, np.random.default_rng([cfg.seed, 3, r]), cfg.explore.start_speed)
    action_rng = np.random.default_rng([cfg.seed, 5, r])
    history = HistoryWindow.steady(start.dynamic, model.H, model.dt)
    jrds: list[float] = []
    ctrl = None
    if policy == "explore":
        mppi_cfg = cfg.mppi.model_copy(update={"seed": derive_seed(cfg.seed, cfg.mppi.seed, r)})
        ctrl = ControllerState.initial(mppi_cfg, CostSpec(EXPLORE, cfg.costs))

    def act(i: int, s: PlantState) -> Action:
        nonlocal history, ctrl
        if i > 0:
            history = history.shifted(s.dynamic)
        if ctrl is not None:
            action, ctrl, diag = mpc_step(ctrl, model, history)
            if diag.all_invalid:
                logger.warning("Round %d step %d: no valid exploration rollout", r, i)
        else:
            action = action_rng.uniform(-1.0, 1.0, size=2)
        history = history.with_last_action(action)
        jrds.append(window_jrd(model, history))
        return Action(float(action[0]), float(action[1]))

    log = run_episode(act, start, n_steps, cfg.plant, None, f"{policy}_round_{r:02d}", "ccw", cfg.seed)
    return log, jrds


def _write_state(out: Path, state: ExploreState) -> None:
    (out / STATE_NAME).write_text(state.model_dump_json(indent=2) + "\n")
    write_csv(
        out / "learning_curve.csv",
        CURVE_COLUMNS,
        (
            (c.round, c.cumulative_steps, c.rmse_total, c.rmse_vx, c.rmse_vy, c.rmse_r, c.mean_jrd_pre)
            for c in state.curve
        ),
    )


def _reset(out: Path) -> None:
    for name in (BUFFER_DIR, EVAL_DIR):
        shutil.rmtree(out / name, ignore_errors=True)
    for path in [out / STATE_NAME, out / "learning_curve.csv", *out.glob("model_round_*.ckpt.json")]:
        path.unlink(missing_ok=True)


def _resume(out: Path, policy: str) -> ExploreState | None:
    path = out / STATE_NAME
    if not path.exists():
        return None
    state = ExploreState.model_validate_json(path.read_text())
    if state.policy != policy:
        raise ConfigError(f"{out} holds a {state.policy!r} exploration run, asked to continue it as {policy!r}")
    if len(read_manifest(out / BUFFER_DIR).episodes) > state.buffer_episodes:
        truncate_dataset(out / BUFFER_DIR, state.buffer_episodes)
    logger.info("Resuming %s exploration after round %d", policy, state.completed_rounds)
    return state


def cmd_explore(cfg: ExperimentConfig, fresh: bool = False) -> ExploreState:
    out = prepare_output(cfg, "explore")
    ex = cfg.explore
    if fresh:
        _reset(out)
    track = desk_track(cfg)
    dt = cfg.plant.dt

    eval_dir = out / EVAL_DIR
    if not (eval_dir / MANIFEST_NAME).exists():
        episodes = collect_episodes(cfg, ex.eval_minutes, derive_seed(cfg.seed, 7), track)
        save_dataset(eval_dir, episodes, H=cfg.model.H, dt=dt)
    eval_set = stack_samples(load_samples(eval_dir, cfg.model.H))

    state = _resume(out, ex.policy)
    if state is None:
        shutil.rmtree(out / BUFFER_DIR, ignore_errors=True)
        warm_rng = np.random.default_rng([cfg.seed, 4])
        start = _random_start(track, warm_rng, ex.start_speed)
        warmup = run_episode(
            lambda i, s: Action(*warm_rng.uniform(-1.0, 1.0, size=2)), start, ex.warmup_steps, cfg.plant, None,
            "warmup", "ccw", cfg.seed,
        )
        append_episode(out / BUFFER_DIR, warmup, dt)
        _retrain(cfg, out, 0)
        state = ExploreState(policy=ex.policy, cumulative_steps=len(warmup), buffer_episodes=1)
        _write_state(out, state)

    for r in range(state.completed_rounds + 1, ex.n_rounds + 1):
        model = load_checkpoint(round_checkpoint(out, r - 1))
        log, jrds = run_round(cfg, model, track, r, ex.policy, ex.steps_per_round)
        manifest = append_episode(out / BUFFER_DIR, log, dt)
        new_model = _retrain(cfg, out, r)
        report = evaluate_rmse(new_model, eval_set)
        row = LearningCurveRow(
            round=r,
            cumulative_steps=state.cumulative_steps + len(log),
            rmse_total=report.rmse_total,
            rmse_vx=report.rmse_vx,
            rmse_vy=report.rmse_vy,
            rmse_r=report.rmse_r,
            mean_jrd_pre=float(np.mean(jrds)) if jrds else 0.0,
        )
        state = ExploreState(
            policy=ex.policy,
            completed_rounds=r,
            cumulative_steps=row.cumulative_steps,
            buffer_episodes=len(manifest.episodes),
            curve=[*state.curve, row],
        )
        _write_state(out, state)
        logger.info(
            "Round %d/%d (%s): %d steps total, held-out RMSE %.5f, pre-round JRD %.4f",
            r, ex.n_rounds, ex.policy, row.cumulative_steps, row.rmse_total, row.mean_jrd_pre,
        )
    return state
