"""Sampling-based MPC (MPPI) over the learned ensemble dynamics.

One controller serves both phases; only the cost changes:
  - explore:        reward accumulated ensemble disagreement (JRD)
  - deploy_direct:  track the centerline at a target speed
  - deploy_safe:    deploy_direct plus a soft JRD penalty and a hard penalty above a JRD threshold

Each rollout particle is propagated with one ensemble member's mean increment
(member k mod B for sample k) while all members are evaluated at every step to
measure disagreement along the way.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Union

import numpy as np

from pennmpc.errors import ConfigError, ControlError, ModelError, ShapeError
from pennmpc.models.domain import ACTION_DIM, HistoryWindow
from pennmpc.models.schemas import CostConfig, MppiConfig
from pennmpc.services.penn_dynamics import PROBABILISTIC, PennModel, build_input_batch, predict_members
from pennmpc.services.uncertainty import jrd_batch
from pennmpc.sim.track import Track, track_frame_batch

logger = logging.getLogger(__name__)

EXPLORE = "explore"
DEPLOY_DIRECT = "deploy_direct"
DEPLOY_SAFE = "deploy_safe"
CostMode = Literal["explore", "deploy_direct", "deploy_safe"]

MemberAssignment = Union[str, int, np.ndarray]  # "cycle", "mean", a member index or one index per sample
Evaluator = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class CostSpec:
    mode: str
    weights: CostConfig = field(default_factory=CostConfig)
    track: Track | None = None
    jrd_threshold: float = math.inf  # delta

    def __post_init__(self) -> None:
        if self.mode not in (EXPLORE, DEPLOY_DIRECT, DEPLOY_SAFE):
            raise ConfigError(f"unknown cost mode {self.mode!r}")
        if self.mode != EXPLORE and self.track is None:
            raise ConfigError(f"{self.mode} needs a reference track")
        if self.mode == DEPLOY_SAFE and self.weights.w_unc <= 0:
            raise ConfigError("deploy_safe needs an uncertainty weight w_unc > 0")

    @property
    def needs_uncertainty(self) -> bool:
        return self.mode in (EXPLORE, DEPLOY_SAFE)


@dataclass(frozen=True)
class ControlSequence:
    actions: np.ndarray  # [T, 2], entries in [-1, 1]

    def __post_init__(self) -> None:
        a = np.asarray(self.actions, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != ACTION_DIM:
            raise ShapeError(f"control sequence must be [T, {ACTION_DIM}], got {a.shape}")
        object.__setattr__(self, "actions", np.clip(a, -1.0, 1.0))

    @property
    def T(self) -> int:
        return self.actions.shape[0]

    @classmethod
    def zeros(cls, T: int) -> "ControlSequence":
        return cls(np.zeros((T, ACTION_DIM)))


@dataclass(frozen=True)
class RolloutResult:
    states: np.ndarray  # [T+1, 3]
    poses: np.ndarray  # [T+1, 3]
    jrd: np.ndarray  # [T]
    cost: float
    valid: bool


@dataclass(frozen=True)
class RolloutBatch:
    states: np.ndarray  # [K, T+1, 3]
    poses: np.ndarray  # [K, T+1, 3]
    jrd: np.ndarray  # [K, T]
    costs: np.ndarray  # [K]
    valid: np.ndarray  # [K]


@dataclass(frozen=True)
class MpcDiagnostics:
    best_cost: float
    mean_jrd: float
    max_jrd: float
    n_invalid: int
    all_invalid: bool = False


@dataclass(frozen=True)
class ControllerState:
    nominal: np.ndarray  # [T, 2]
    cfg: MppiConfig
    cost: CostSpec
    step: int = 0
    prev_action: np.ndarray = field(default_factory=lambda: np.zeros(ACTION_DIM))

    @classmethod
    def initial(cls, cfg: MppiConfig, cost: CostSpec) -> "ControllerState":
        return cls(np.zeros((cfg.T, ACTION_DIM)), cfg, cost)


# =====================================================================
# Sampling
# =====================================================================


def sample_perturbations(cfg: MppiConfig, step: int = 0, indices=None) -> np.ndarray:
    """[K, T, 2] zero-mean Gaussian noise; sample k is drawn from its own (seed, step, k) stream."""
    ks = range(cfg.K) if indices is None else [int(k) for k in indices]
    sigma = np.asarray(cfg.sigma, dtype=np.float64)
    out = np.empty((len(ks), cfg.T, ACTION_DIM))
    for j, k in enumerate(ks):
        source = k - (k % 2) if cfg.antithetic else k
        z = np.random.default_rng([cfg.seed, step, source]).standard_normal((cfg.T, ACTION_DIM))
        if cfg.antithetic and k % 2:
            z = -z
        out[j] = z * sigma
    return out


# =====================================================================
# Costs
# =====================================================================


def exploration_cost(states: np.ndarray, jrd: np.ndarray, controls: np.ndarray, cost: CostSpec) -> np.ndarray:
    """-sum_t jrd_t + w_ctrl * sum_t |u_t|^2, plus penalty_big for every step above v_limit when one is set.

    Inputs carry the horizon on the last state/time axis: states [..., T, 3], jrd [..., T], controls [..., T, 2].
    """
    w = cost.weights
    c = -np.sum(jrd, axis=-1) + w.w_ctrl * np.sum(controls * controls, axis=(-1, -2))
    if w.v_limit is None:
        return c
    return c + w.penalty_big * np.sum(states[..., 0] > w.v_limit, axis=-1)


def deployment_cost(states: np.ndarray, jrd: np.ndarray, e_lat: np.ndarray, du: np.ndarray, cost: CostSpec,
                    off_track: np.ndarray | None = None) -> np.ndarray:
    """Tracking, speed and control-rate terms; deploy_safe adds gamma*|jrd| and penalty_big where |jrd| > delta.

    Order-2 JRD turns negative when members agree on the mean but not on the variance; the safe
    terms use its magnitude.
    """
    w = cost.weights
    speed_err = states[..., 0] - w.target_speed
    c = np.sum(w.w_track * e_lat * e_lat + w.w_speed * speed_err * speed_err, axis=-1)
    c = c + w.w_ctrl * np.sum(du * du, axis=(-1, -2))
    if cost.mode == DEPLOY_SAFE:
        disagreement = np.abs(jrd)
        c = c + np.sum(w.w_unc * disagreement + w.penalty_big * (disagreement > cost.jrd_threshold), axis=-1)
    if off_track is not None:
        c = np.where(np.any(off_track, axis=-1), np.inf, c)
    return c


def _rollout_costs(states: np.ndarray, poses: np.ndarray, jrd: np.ndarray, seqs: np.ndarray, cost: CostSpec,
                   prev_action: np.ndarray) -> np.ndarray:
    if cost.mode == EXPLORE:
        return exploration_cost(states[:, 1:], jrd, seqs, cost)
    _, e_lat, _, off = track_frame_batch(poses[:, 1:, :2], poses[:, 1:, 2], cost.track)
    prev = np.broadcast_to(prev_action, (seqs.shape[0], 1, ACTION_DIM))
    du = np.diff(np.concatenate([prev, seqs], axis=1), axis=1)
    return deployment_cost(states[:, 1:], jrd, e_lat, du, cost, off)


# =====================================================================
# Rollouts
# =====================================================================


def integrate_pose(pose: np.ndarray, state: np.ndarray, next_state: np.ndarray, dt: float) -> np.ndarray:
    """Midpoint integration of the body velocities into (x, y, yaw); works on [..., 3]."""
    vx = 0.5 * (state[..., 0] + next_state[..., 0])
    vy = 0.5 * (state[..., 1] + next_state[..., 1])
    r = 0.5 * (state[..., 2] + next_state[..., 2])
    yaw_mid = pose[..., 2] + 0.5 * r * dt
    c, s = np.cos(yaw_mid), np.sin(yaw_mid)
    return np.stack(
        [pose[..., 0] + (vx * c - vy * s) * dt, pose[..., 1] + (vx * s + vy * c) * dt, pose[..., 2] + r * dt],
        axis=-1,
    )


def _assignment(model: PennModel, K: int, member_assignment: MemberAssignment) -> np.ndarray | None:
    if isinstance(member_assignment, str):
        if member_assignment == "mean":
            return None
        if member_assignment == "cycle":
            return np.arange(K) % model.B
        raise ConfigError(f"unknown member assignment {member_assignment!r}")
    assign = np.broadcast_to(np.asarray(member_assignment, dtype=np.int64), (K,))
    if (assign < 0).any() or (assign >= model.B).any():
        raise ModelError(f"member assignment out of range for B={model.B}")
    return assign


def rollout_batch(model: PennModel, history: HistoryWindow, seqs: np.ndarray, cost: CostSpec,
                  member_assignment: MemberAssignment = "cycle", pose=None,
                  prev_action: np.ndarray | None = None) -> RolloutBatch:
    """Propagate K control sequences [K, T, 2] through the ensemble and score them.

    The newest action slot of `history` is a placeholder: each step's candidate
    action fills it before the window is fed to the model.
    """
    if cost.needs_uncertainty and model.mode != PROBABILISTIC:
        raise ModelError(f"{cost.mode} needs a probabilistic ensemble, got a {model.mode} model")
    if history.H != model.H:
        raise ShapeError(f"history has H={history.H}, model expects H={model.H}")
    seqs = np.asarray(seqs, dtype=np.float64)
    K, T, _ = seqs.shape
    assign = _assignment(model, K, member_assignment)
    use_jrd = model.mode == PROBABILISTIC and model.B >= 2
    pose0 = np.zeros(3) if pose is None else np.asarray(pose, dtype=np.float64)
    prev_action = np.zeros(ACTION_DIM) if prev_action is None else np.asarray(prev_action, dtype=np.float64)

    window = np.broadcast_to(history.states, (K, model.H, 3)).copy()
    past_actions = np.broadcast_to(history.actions[:-1], (K, model.H - 1, ACTION_DIM)).copy()
    x = window[:, -1].copy()
    p = np.broadcast_to(pose0, (K, 3)).copy()
    valid = np.ones(K, dtype=bool)
    rows = np.arange(K)
    states, poses, jrds = [x], [p], []

    with np.errstate(all="ignore"):
        for t in range(T):
            acts = np.concatenate([past_actions, seqs[:, t, None, :]], axis=1)
            means, variances = predict_members(model, build_input_batch(window, acts, model.stats), check_finite=False)
            if use_jrd:
                j = jrd_batch(np.swapaxes(x[None] + means, 0, 1), np.swapaxes(variances, 0, 1))
            else:
                j = np.zeros(K)
            delta = means.mean(axis=0) if assign is None else means[assign, rows]
            x_next = x + delta
            bad = ~np.isfinite(x_next).all(axis=1) | ~np.isfinite(j)
            valid &= ~bad
            x_next = np.where(bad[:, None], x, x_next)
            j = np.where(bad, 0.0, j)
            p = integrate_pose(p, x, x_next, model.dt)
            window = np.concatenate([window[:, 1:], x_next[:, None]], axis=1)
            past_actions = acts[:, 1:]
            x = x_next
            states.append(x)
            poses.append(p)
            jrds.append(j)

        state_traj = np.stack(states, axis=1)
        pose_traj = np.stack(poses, axis=1)
        jrd_traj = np.stack(jrds, axis=1)
        costs = _rollout_costs(state_traj, pose_traj, jrd_traj, seqs, cost, prev_action)
    costs = np.where(valid & np.isfinite(costs), costs, np.inf)
    return RolloutBatch(state_traj, pose_traj, jrd_traj, costs, valid & np.isfinite(costs))


def rollout(model: PennModel, history: HistoryWindow, seq: ControlSequence, cost: CostSpec,
            member_assignment: Union[int, str] = 0, pose=None, prev_action=None) -> RolloutResult:
    """Single-sequence rollout; `member_assignment` is a member index or "mean"."""
    batch = rollout_batch(
        model, history, seq.actions[None], cost,
        member_assignment if isinstance(member_assignment, str) else np.array([member_assignment]),
        pose, prev_action,
    )
    return RolloutResult(batch.states[0], batch.poses[0], batch.jrd[0], float(batch.costs[0]), bool(batch.valid[0]))


# =====================================================================
# Weighting and update
# =====================================================================


def mppi_weights(costs: np.ndarray, lam: float) -> np.ndarray:
    """Softmin weights exp(-(S - min S) / lambda), normalised; infinite costs get weight 0."""
    costs = np.asarray(costs, dtype=np.float64)
    finite = np.isfinite(costs)
    if not finite.any():
        raise ControlError("every rollout is invalid; no weights can be formed")
    shifted = np.where(finite, costs - costs[finite].min(), np.inf)
    w = np.exp(-shifted / lam)
    return w / w.sum()


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average along axis 0, averaging only the samples inside the sequence at the edges."""
    if window <= 1:
        return x
    T = x.shape[0]
    h = window // 2
    c = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(x, axis=0)])
    idx = np.arange(T)
    lo, hi = np.clip(idx - h, 0, T), np.clip(idx + h + 1, 0, T)
    return (c[hi] - c[lo]) / (hi - lo).reshape((-1,) + (1,) * (x.ndim - 1))


def mppi_update(nominal: np.ndarray, perturbations: np.ndarray, weights: np.ndarray, smoothing_window: int = 1) -> np.ndarray:
    """U' = clip(U + smooth(sum_k w_k eps_k), -1, 1)."""
    nominal = np.asarray(nominal, dtype=np.float64)
    if perturbations.shape[1:] != nominal.shape or perturbations.shape[0] != weights.shape[0]:
        raise ShapeError(f"perturbations {perturbations.shape} do not match nominal {nominal.shape} / weights {weights.shape}")
    step = np.tensordot(weights, perturbations, axes=(0, 0))
    return np.clip(nominal + moving_average(step, smoothing_window), -1.0, 1.0)


# =====================================================================
# Control step
# =====================================================================


def mpc_step_with(ctrl: ControllerState, evaluate: Evaluator) -> tuple[np.ndarray, ControllerState, MpcDiagnostics]:
    """One MPPI iteration against an arbitrary evaluator returning (costs [K], jrd [K, T])."""
    cfg = ctrl.cfg
    noise = sample_perturbations(cfg, ctrl.step)
    seqs = np.clip(ctrl.nominal[None] + noise, -1.0, 1.0)
    eps = seqs - ctrl.nominal[None]
    costs, jrd = evaluate(seqs)
    finite = np.isfinite(costs)
    n_invalid = int((~finite).sum())

    try:
        weights = mppi_weights(costs, cfg.lambda_)
    except ControlError:
        logger.warning("MPPI step %d: all %d rollouts invalid; holding the nominal and emitting a zero action", ctrl.step, cfg.K)
        zero = np.zeros(ACTION_DIM)
        diag = MpcDiagnostics(math.inf, 0.0, 0.0, n_invalid, all_invalid=True)
        return zero, replace(ctrl, step=ctrl.step + 1, prev_action=zero), diag

    updated = mppi_update(ctrl.nominal, eps, weights, cfg.smoothing_window)
    action = updated[0].copy()
    shifted = np.vstack([updated[1:], updated[-1:]])
    valid_jrd = jrd[finite]
    diag = MpcDiagnostics(
        best_cost=float(costs[finite].min()),
        mean_jrd=float(valid_jrd.mean()) if valid_jrd.size else 0.0,
        max_jrd=float(valid_jrd.max()) if valid_jrd.size else 0.0,
        n_invalid=n_invalid,
    )
    return action, replace(ctrl, nominal=shifted, step=ctrl.step + 1, prev_action=action), diag


def mpc_step(ctrl: ControllerState, model: PennModel, history: HistoryWindow, pose=None) -> tuple[np.ndarray, ControllerState, MpcDiagnostics]:
    """Sample, roll out through the ensemble, reweight, emit the first action and shift the nominal."""

    def evaluate(seqs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        batch = rollout_batch(model, history, seqs, ctrl.cost, "cycle", pose, ctrl.prev_action)
        return batch.costs, batch.jrd

    return mpc_step_with(ctrl, evaluate)
