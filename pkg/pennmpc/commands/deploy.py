"""`penn-mpc deploy`: closed-loop laps on the plant with the learned ensemble inside MPPI."""

from __future__ import annotations

import logging
import math

import numpy as np

from pennmpc.commands.common import (
    derive_seed,
    desk_track,
    load_split,
    prepare_output,
    require_checkpoint,
    write_csv,
)
from pennmpc.errors import ConfigError, ModelError, OffTrackError
from pennmpc.models.domain import Action, HistoryWindow
from pennmpc.models.schemas import DeploySummary, ExperimentConfig
from pennmpc.services.mppi_controller import DEPLOY_DIRECT, DEPLOY_SAFE, ControllerState, CostSpec, mpc_step
from pennmpc.services.penn_dynamics import PROBABILISTIC, PennModel, batch_jrd, load_checkpoint, window_jrd
from pennmpc.sim.maneuvers import start_state
from pennmpc.sim.plant import plant_step
from pennmpc.sim.track import track_frame

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ("t", "x", "y", "yaw", "vx", "vy", "r", "steer", "throttle", "s", "e_lat", "jrd")
DIAGNOSTIC_COLUMNS = ("t", "mode", "applied_steer", "applied_throttle", "best_cost", "mean_jrd", "max_jrd", "n_invalid")
OFF_TRACK = "off_track"
OUT_OF_STEPS = "max_steps"


def jrd_threshold(cfg: ExperimentConfig, model: PennModel) -> float:
    """The configured delta, or the configured quantile of |JRD| over the training split the model was fit on."""
    if cfg.costs.jrd_threshold is not None:
        return float(cfg.costs.jrd_threshold)
    if not cfg.io.data_dir:
        raise ConfigError("safe deployment needs costs.jrd_threshold or io.data_dir to derive it from")
    train_set, _, _ = load_split(cfg.io.data_dir, model.H, cfg)
    values = np.abs(batch_jrd(model, train_set))
    delta = float(np.quantile(values, cfg.costs.jrd_quantile))
    logger.info("JRD threshold %.6g (%.0f%% quantile over %d training windows)", delta, 100 * cfg.costs.jrd_quantile, len(values))
    return delta


def cmd_deploy(cfg: ExperimentConfig) -> DeploySummary:
    out = prepare_output(cfg, "deploy")
    dep = cfg.deploy
    model = load_checkpoint(require_checkpoint(cfg))
    if dep.mode == "safe" and (model.mode != PROBABILISTIC or model.B < 2):
        raise ModelError(f"safe deployment needs a probabilistic ensemble with B >= 2, got {model.mode} B={model.B}")

    track = desk_track(cfg)
    delta = jrd_threshold(cfg, model) if dep.mode == "safe" else None
    cost = CostSpec(
        DEPLOY_SAFE if dep.mode == "safe" else DEPLOY_DIRECT,
        cfg.costs,
        track,
        math.inf if delta is None else delta,
    )
    mppi_cfg = cfg.mppi.model_copy(update={"seed": derive_seed(cfg.seed, cfg.mppi.seed)})
    ctrl = ControllerState.initial(mppi_cfg, cost)

    p = cfg.plant
    L = track.total_length
    state = start_state(track, 0.0, dep.start_speed)
    history = HistoryWindow.steady(state.dynamic, model.H, model.dt)
    s_prev = track_frame(state.pose, track).s
    progress, max_e_lat = 0.0, 0.0
    lap_time = None
    failure = None
    trajectory, diagnostics, executed_jrd = [], [], []

    for i in range(dep.max_steps):
        t = round(i * p.dt, 9)
        try:
            frame = track_frame(state.pose, track)
        except OffTrackError as exc:
            failure = OFF_TRACK
            logger.warning("Left the track at t=%.1f s: %s", t, exc)
            break
        ds = (frame.s - s_prev + 0.5 * L) % L - 0.5 * L
        progress += ds
        s_prev = frame.s
        max_e_lat = max(max_e_lat, abs(frame.e_lat))
        if abs(frame.e_lat) > track.half_width:
            failure = OFF_TRACK
            logger.warning("Left the track at t=%.1f s: |e_lat| = %.2f m > %.2f m", t, abs(frame.e_lat), track.half_width)
            break
        if lap_time is None and progress >= L:
            lap_time = t
        if progress >= dep.laps * L:
            break

        action, ctrl, diag = mpc_step(ctrl, model, history, state.pose)
        history = history.with_last_action(action)
        jrd = window_jrd(model, history)
        executed_jrd.append(jrd)
        trajectory.append((t, state.x, state.y, state.yaw, state.vx, state.vy, state.r, action[0], action[1], frame.s, frame.e_lat, jrd))
        diagnostics.append((t, dep.mode, action[0], action[1], diag.best_cost, diag.mean_jrd, diag.max_jrd, diag.n_invalid))
        state = plant_step(state, Action(float(action[0]), float(action[1])), p)
        history = history.shifted(state.dynamic)

    laps_completed = int(max(progress, 0.0) // L)
    completed = failure is None and laps_completed >= dep.laps
    if failure is None and not completed:
        failure = OUT_OF_STEPS

    write_csv(out / "trajectory.csv", TRAJECTORY_COLUMNS, trajectory)
    write_csv(out / "diagnostics.csv", DIAGNOSTIC_COLUMNS, diagnostics)
    summary = DeploySummary(
        mode=dep.mode,
        completed=completed,
        laps_completed=laps_completed,
        steps=len(diagnostics),
        mean_jrd=float(np.mean(executed_jrd)) if executed_jrd else 0.0,
        max_jrd=float(np.max(executed_jrd)) if executed_jrd else 0.0,
        lap_time=lap_time,
        max_abs_e_lat=max_e_lat,
        jrd_threshold=delta,
        failure=failure,
    )
    (out / "summary.json").write_text(summary.model_dump_json(indent=2) + "\n")
    logger.info(
        "%s deployment: %s after %d steps, mean JRD %.5f, max |e_lat| %.2f m",
        dep.mode, "completed" if completed else f"failed ({failure})", summary.steps, summary.mean_jrd, max_e_lat,
    )
    return summary
