"""Numeric domain types shared by the simulator, the dataset store and the learned model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from pennmpc.errors import ShapeError

STATE_DIM = 3  # (vx, vy, r)
ACTION_DIM = 2  # (steer, throttle)
PAIR_DIM = STATE_DIM + ACTION_DIM
DEFAULT_DT = 0.1

STATE_NAMES = ("vx", "vy", "r")
STATE_UNITS = ("m/s", "m/s", "rad/s")


class StateTriple(NamedTuple):
    vx: float
    vy: float
    r: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


class Action(NamedTuple):
    steer: float
    throttle: float

    def clamped(self) -> "Action":
        return Action(min(max(self.steer, -1.0), 1.0), min(max(self.throttle, -1.0), 1.0))

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


@dataclass(frozen=True)
class HistoryWindow:
    """The last H (state, action) pairs, oldest first."""

    states: np.ndarray  # [H, 3]
    actions: np.ndarray  # [H, 2]
    dt: float = DEFAULT_DT

    def __post_init__(self) -> None:
        states = np.asarray(self.states, dtype=np.float64)
        actions = np.asarray(self.actions, dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != STATE_DIM:
            raise ShapeError(f"history states must be [H, {STATE_DIM}], got {states.shape}")
        if actions.shape != (states.shape[0], ACTION_DIM):
            raise ShapeError(f"history actions must be [{states.shape[0]}, {ACTION_DIM}], got {actions.shape}")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    @property
    def H(self) -> int:
        return self.states.shape[0]

    @property
    def current_state(self) -> np.ndarray:
        return self.states[-1]

    @classmethod
    def from_pairs(cls, pairs: list[tuple[StateTriple, Action]], dt: float = DEFAULT_DT) -> "HistoryWindow":
        states = np.array([list(s) for s, _ in pairs], dtype=np.float64).reshape(-1, STATE_DIM)
        actions = np.array([list(a) for _, a in pairs], dtype=np.float64).reshape(-1, ACTION_DIM)
        return cls(states, actions, dt)

    @classmethod
    def steady(cls, state: np.ndarray, H: int, dt: float = DEFAULT_DT) -> "HistoryWindow":
        """H copies of `state` with zero actions; used to start a closed loop."""
        return cls(np.tile(np.asarray(state, dtype=np.float64), (H, 1)), np.zeros((H, ACTION_DIM)), dt)

    def with_last_action(self, action: np.ndarray) -> "HistoryWindow":
        actions = self.actions.copy()
        actions[-1] = action
        return HistoryWindow(self.states, actions, self.dt)

    def shifted(self, next_state: np.ndarray, next_action: np.ndarray | None = None) -> "HistoryWindow":
        """Drop the oldest pair and append (next_state, next_action)."""
        action = np.zeros(ACTION_DIM) if next_action is None else np.asarray(next_action, dtype=np.float64)
        return HistoryWindow(
            np.vstack([self.states[1:], next_state]),
            np.vstack([self.actions[1:], action]),
            self.dt,
        )


def flatten_windows(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """[N, H, 3] states and [N, H, 2] actions -> [N, H*5] rows, oldest pair first."""
    pairs = np.concatenate([states, actions], axis=-1)
    return pairs.reshape(pairs.shape[:-2] + (pairs.shape[-2] * PAIR_DIM,))


@dataclass(frozen=True)
class NormStats:
    """Per-coordinate z-score statistics, in raw units."""

    input_mean: np.ndarray  # [H*5]
    input_std: np.ndarray  # [H*5]
    target_mean: np.ndarray  # [3]
    target_std: np.ndarray  # [3]

    STD_FLOOR = 1e-6

    def __post_init__(self) -> None:
        for name in ("input_mean", "input_std", "target_mean", "target_std"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.input_mean.shape != self.input_std.shape or self.input_mean.shape[0] % PAIR_DIM:
            raise ShapeError(f"input stats must be H*{PAIR_DIM} long, got {self.input_mean.shape}")
        if self.target_mean.shape != (STATE_DIM,) or self.target_std.shape != (STATE_DIM,):
            raise ShapeError("target stats must have length 3")
        if not ((self.input_std > 0).all() and (self.target_std > 0).all()):
            raise ShapeError("every std must be strictly positive")

    @property
    def H(self) -> int:
        return self.input_mean.shape[0] // PAIR_DIM

    @classmethod
    def identity(cls, H: int) -> "NormStats":
        return cls(np.zeros(H * PAIR_DIM), np.ones(H * PAIR_DIM), np.zeros(STATE_DIM), np.ones(STATE_DIM))


@dataclass(frozen=True)
class SampleBatch:
    """Stacked windows and their one-step state increments."""

    states: np.ndarray  # [N, H, 3]
    actions: np.ndarray  # [N, H, 2]
    targets: np.ndarray  # [N, 3], raw units

    def __len__(self) -> int:
        return int(self.targets.shape[0])

    @property
    def H(self) -> int:
        return int(self.states.shape[1])

    def raw_features(self) -> np.ndarray:
        return flatten_windows(self.states, self.actions)

    def subset(self, index: np.ndarray) -> "SampleBatch":
        return SampleBatch(self.states[index], self.actions[index], self.targets[index])


@dataclass
class EpisodeLog:
    """Fixed-rate state/action/pose records of one run on the plant."""

    t: np.ndarray  # [N]
    states: np.ndarray  # [N, 3]
    actions: np.ndarray  # [N, 2]
    poses: np.ndarray  # [N, 3] (x, y, yaw)
    tag: str = "manual"
    direction: str = "ccw"
    seed: int = 0
    truncated: bool = False
    dt: float = DEFAULT_DT
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.t.shape[0])

    @property
    def duration(self) -> float:
        return len(self) * self.dt
