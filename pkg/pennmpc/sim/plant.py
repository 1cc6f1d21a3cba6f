"""Dynamic bicycle model with simplified magic-formula lateral tyre forces.

This is the ground-truth plant the learned model is trained against. It is
only ever observed through logged (vx, vy, r) / (steer, throttle) rows; the
learned model never sees PlantParams.
"""

from __future__ import annotations

import logging
import math
from typing import NamedTuple

import numpy as np

from pennmpc.models.domain import Action
from pennmpc.models.schemas import PlantParams, TireParams

logger = logging.getLogger(__name__)

GRAVITY = 9.81
BRAKE_FADE_SPEED = 0.5  # m/s; braking fades out below this so it never drives the car backwards


class PlantState(NamedTuple):
    vx: float
    vy: float
    r: float
    x: float
    y: float
    yaw: float

    @property
    def dynamic(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.r])

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])

    def mirrored(self) -> "PlantState":
        return PlantState(self.vx, -self.vy, -self.r, self.x, -self.y, -self.yaw)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return math.pi - np.mod(math.pi - a, 2.0 * math.pi)


def tire_lateral_force(slip_angle, tire: TireParams, normal_load: float):
    """F = mu * Fz * sin(C * atan(B * slip)); odd in slip."""
    return tire.mu * normal_load * np.sin(tire.C_shape * np.arctan(tire.B_stiff * slip_angle))


def normal_loads(p: PlantParams) -> tuple[float, float]:
    wheelbase = p.lf + p.lr
    return p.mass * GRAVITY * p.lr / wheelbase, p.mass * GRAVITY * p.lf / wheelbase


def _derivatives(z: np.ndarray, steer: float, accel_cmd: float, p: PlantParams, loads: tuple[float, float]) -> np.ndarray:
    vx, vy, r, _, _, yaw = z
    u = max(vx, p.v_min_slip)
    slip_f = steer - math.atan2(vy + p.lf * r, u)
    slip_r = -math.atan2(vy - p.lr * r, u)
    fy_f = float(tire_lateral_force(slip_f, p.tire_front, loads[0]))
    fy_r = float(tire_lateral_force(slip_r, p.tire_rear, loads[1]))

    if accel_cmd < 0.0:
        accel_cmd *= math.tanh(max(vx, 0.0) / BRAKE_FADE_SPEED)
    cos_d, sin_d = math.cos(steer), math.sin(steer)

    dvx = accel_cmd - p.drag * vx / p.mass - fy_f * sin_d / p.mass + vy * r
    dvy = (fy_f * cos_d + fy_r) / p.mass - vx * r
    dr = (p.lf * fy_f * cos_d - p.lr * fy_r) / p.yaw_inertia
    cos_y, sin_y = math.cos(yaw), math.sin(yaw)
    return np.array([dvx, dvy, dr, vx * cos_y - vy * sin_y, vx * sin_y + vy * cos_y, r])


def plant_step(s: PlantState, a: Action, p: PlantParams, substeps: int | None = None) -> PlantState:
    """Advance one dt with fixed-step RK4 (p.substeps sub-steps)."""
    a = Action(*a).clamped()
    steer = a.steer * p.max_steer
    accel = a.throttle * p.max_accel
    loads = normal_loads(p)
    n = substeps or p.substeps
    h = p.dt / n

    z = np.array(s, dtype=np.float64)
    for _ in range(n):
        k1 = _derivatives(z, steer, accel, p, loads)
        k2 = _derivatives(z + 0.5 * h * k1, steer, accel, p, loads)
        k3 = _derivatives(z + 0.5 * h * k2, steer, accel, p, loads)
        k4 = _derivatives(z + h * k3, steer, accel, p, loads)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    bounds = (p.vx_max, p.vy_max, p.r_max)
    clipped = np.clip(z[:3], [-b for b in bounds], bounds)
    if not np.array_equal(clipped, z[:3]) or not np.isfinite(z).all():
        logger.warning("Plant state %s left sanity bounds; clamping", np.round(z[:3], 3).tolist())
        clipped = np.nan_to_num(clipped, nan=0.0)
        z[:3] = clipped
    return PlantState(float(z[0]), float(z[1]), float(z[2]), float(z[3]), float(z[4]), float(wrap_angle(z[5])))
