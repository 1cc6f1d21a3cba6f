"""Scripted data-collection maneuvers on the desk track.

Three regimes are logged at the plant rate in either direction:
  - zigzag_low_speed: sinusoidal steering on top of centerline pursuit at low speed
  - high_speed_laps:  pure-pursuit laps at a curvature-limited high speed target
  - slide:            periodic full-lock step-steer with throttle bursts
"""

from __future__ import annotations

import logging
import math
from typing import Callable, Literal

import numpy as np

from pennmpc.errors import OffTrackError
from pennmpc.models.domain import Action, EpisodeLog
from pennmpc.models.schemas import ManeuverKind, PlantParams
from pennmpc.sim.plant import GRAVITY, PlantState, plant_step, wrap_angle
from pennmpc.sim.track import Track, track_frame

logger = logging.getLogger(__name__)

Direction = Literal["ccw", "cw"]
MANEUVERS: tuple[str, ...] = ("zigzag_low_speed", "high_speed_laps", "slide")

ZIGZAG_SPEED = 3.0
ZIGZAG_AMPLITUDE = 0.6
HIGH_SPEED_TARGET = 10.0
LATERAL_ACCEL_MARGIN = 0.7  # fraction of mu*g used for the curvature speed limit
SLIDE_SPEED = 3.5
SLIDE_PERIOD = 4.0
SLIDE_HOLD = 1.5
SLIDE_BURST = 0.6
SPEED_GAIN = 0.5

Policy = Callable[[int, PlantState], Action]


def zigzag_command(t: np.ndarray, period: float, amplitude: float = ZIGZAG_AMPLITUDE, phase: float = 0.0) -> np.ndarray:
    """The sinusoidal part of the zigzag steering command."""
    return amplitude * np.sin(2.0 * math.pi * np.asarray(t) / period + phase)


def start_state(track: Track, s0: float, speed: float) -> PlantState:
    x, y = track.point_at(s0)
    return PlantState(speed, 0.0, 0.0, float(x), float(y), float(track.heading_at(s0)))


def pure_pursuit_steer(state: PlantState, track: Track, p: PlantParams, lookahead: float) -> float:
    """Normalised steering toward the centerline point `lookahead` metres ahead.

    A target behind the car (after a spin) gets full lock toward it.
    """
    frame = track_frame(state.pose, track)
    tx, ty = track.point_at(frame.s + lookahead)
    alpha = float(wrap_angle(math.atan2(ty - state.y, tx - state.x) - state.yaw))
    if abs(alpha) > 0.5 * math.pi:
        return math.copysign(1.0, alpha)
    ld = max(math.hypot(tx - state.x, ty - state.y), 1e-6)
    delta = math.atan2(2.0 * (p.lf + p.lr) * math.sin(alpha), ld)
    return max(-1.0, min(1.0, delta / p.max_steer))


def speed_throttle(vx: float, target: float, gain: float = SPEED_GAIN) -> float:
    return max(-1.0, min(1.0, gain * (target - vx)))


def curvature_speed_limit(state: PlantState, track: Track, p: PlantParams, horizon: float = 15.0) -> float:
    s = track_frame(state.pose, track).s
    kappa = float(np.abs(track.curvature_at(s + np.linspace(0.0, horizon, 16))).max())
    mu = min(p.tire_front.mu, p.tire_rear.mu)
    if kappa < 1e-9:
        return math.inf
    return math.sqrt(LATERAL_ACCEL_MARGIN * mu * GRAVITY / kappa)


def run_episode(policy: Policy, state: PlantState, n_steps: int, p: PlantParams, track: Track | None,
                tag: str, direction: str = "ccw", seed: int = 0) -> EpisodeLog:
    """Roll `policy` on the plant for n_steps rows; stops early (truncated) if the car leaves the track envelope."""
    t, states, actions, poses = [], [], [], []
    truncated = False
    for i in range(n_steps):
        if track is not None:
            try:
                track_frame(state.pose, track)
            except OffTrackError:
                truncated = True
                logger.warning("%s episode (seed %d) left the track envelope at t=%.1f s; truncating", tag, seed, i * p.dt)
                break
        action = Action(*policy(i, state)).clamped()
        t.append(round(i * p.dt, 9))
        states.append(state.dynamic)
        actions.append(action.as_array())
        poses.append(state.pose)
        state = plant_step(state, action, p)
    return EpisodeLog(
        t=np.array(t),
        states=np.array(states).reshape(-1, 3),
        actions=np.array(actions).reshape(-1, 2),
        poses=np.array(poses).reshape(-1, 3),
        tag=tag,
        direction=direction,
        seed=seed,
        truncated=truncated,
        dt=p.dt,
    )


def scripted_maneuver(kind: ManeuverKind, duration: float, direction: Direction, seed: int,
                      track: Track, p: PlantParams) -> EpisodeLog:
    rng = np.random.default_rng([seed, MANEUVERS.index(kind)])
    course = track if direction == "ccw" else track.reversed()
    s0 = float(rng.uniform(0.0, course.total_length))
    n_steps = int(round(duration / p.dt))

    if kind == "zigzag_low_speed":
        period = float(rng.uniform(2.0, 4.0))
        phase = float(rng.uniform(0.0, 2.0 * math.pi))

        def policy(i: int, s: PlantState) -> Action:
            wiggle = float(zigzag_command(i * p.dt, period, phase=phase))
            return Action(pure_pursuit_steer(s, course, p, 4.0) + wiggle, speed_throttle(s.vx, ZIGZAG_SPEED))

        state = start_state(course, s0, ZIGZAG_SPEED)

    elif kind == "high_speed_laps":
        top = HIGH_SPEED_TARGET * float(rng.uniform(0.9, 1.1))

        def policy(i: int, s: PlantState) -> Action:
            target = min(top, curvature_speed_limit(s, course, p))
            lookahead = max(4.0, 0.8 * s.vx)
            return Action(pure_pursuit_steer(s, course, p, lookahead), speed_throttle(s.vx, target))

        state = start_state(course, s0, 0.5 * top)

    elif kind == "slide":
        first_sign = 1.0 if rng.uniform() < 0.5 else -1.0
        lead_in = 1.0

        def policy(i: int, s: PlantState) -> Action:
            t = i * p.dt - lead_in
            if t >= 0.0:
                cycle, phase_t = divmod(t, SLIDE_PERIOD)
                if phase_t < SLIDE_HOLD:
                    return Action(first_sign * (-1.0) ** int(cycle), 0.2)
                if phase_t < SLIDE_HOLD + SLIDE_BURST:
                    return Action(pure_pursuit_steer(s, course, p, 4.0), 1.0)
            return Action(pure_pursuit_steer(s, course, p, 4.0), speed_throttle(s.vx, SLIDE_SPEED))

        state = start_state(course, s0, SLIDE_SPEED)

    else:
        raise ValueError(f"unknown maneuver {kind!r}")

    log = run_episode(policy, state, n_steps, p, course, kind, direction, seed)
    logger.info("%s %s (seed %d): %d rows%s", kind, direction, seed, len(log), " [truncated]" if log.truncated else "")
    return log
