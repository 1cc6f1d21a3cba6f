"""Pydantic models for configuration sections, reports and on-disk manifests."""

from __future__ import annotations

import math
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


# ── Vehicle simulator ───────────────────────────────────────────────


class TireParams(_Section):
    B_stiff: float = Field(10.0, gt=0)
    C_shape: float = Field(1.9, gt=0)
    mu: float = Field(1.0, gt=0)


class PlantParams(_Section):
    mass: float = Field(200.0, gt=0)  # kg
    yaw_inertia: float = Field(80.0, gt=0)  # kg*m^2
    lf: float = Field(0.7, gt=0)  # m
    lr: float = Field(0.6, gt=0)  # m
    tire_front: TireParams = Field(default_factory=TireParams)
    tire_rear: TireParams = Field(default_factory=TireParams)
    drag: float = Field(1.5, gt=0)  # N*s/m
    max_steer: float = Field(0.45, gt=0)  # rad
    max_accel: float = Field(4.0, gt=0)  # m/s^2
    dt: float = Field(0.1, gt=0)  # s
    substeps: int = Field(20, ge=1)
    v_min_slip: float = Field(1.0, gt=0)  # m/s, floor on vx inside slip angles
    vx_max: float = Field(100.0, gt=0)
    vy_max: float = Field(50.0, gt=0)
    r_max: float = Field(20.0, gt=0)


class TrackSegment(_Section):
    kind: Literal["straight", "arc"]
    length: Optional[float] = Field(None, gt=0)  # straight only
    radius: Optional[float] = Field(None, gt=0)  # arc only
    angle: Optional[float] = None  # arc only, rad, left turns positive

    @model_validator(mode="after")
    def _check_kind(self) -> "TrackSegment":
        if self.kind == "straight" and self.length is None:
            raise ValueError("straight segment needs a length")
        if self.kind == "arc" and (self.radius is None or not self.angle):
            raise ValueError("arc segment needs a radius and a non-zero angle")
        return self

    @property
    def arc_length(self) -> float:
        if self.kind == "straight":
            return float(self.length)
        return float(self.radius) * abs(float(self.angle))


def desk_track_segments() -> list[TrackSegment]:
    """Roughly 255 m loop with two moderate (R=20 m, 90 deg) and four sharp (R=7 m, 45 deg) curves."""
    half = [
        TrackSegment(kind="straight", length=45.0),
        TrackSegment(kind="arc", radius=20.0, angle=math.pi / 2),
        TrackSegment(kind="straight", length=20.0),
        TrackSegment(kind="arc", radius=7.0, angle=math.pi / 4),
        TrackSegment(kind="straight", length=20.0),
        TrackSegment(kind="arc", radius=7.0, angle=math.pi / 4),
    ]
    return half + [seg.model_copy() for seg in half]


class TrackSpec(_Section):
    segments: list[TrackSegment] = Field(default_factory=desk_track_segments)
    half_width: float = Field(3.0, gt=0)
    resample_step: float = Field(0.5, gt=0)

    @classmethod
    def circle(cls, radius: float, half_width: float = 3.0) -> "TrackSpec":
        return cls(
            segments=[TrackSegment(kind="arc", radius=radius, angle=2 * math.pi)],
            half_width=half_width,
        )


# ── Learning ────────────────────────────────────────────────────────


class ModelConfig(_Section):
    H: int = Field(4, ge=1)
    B: int = Field(5, ge=1)
    hidden: list[int] = Field(default_factory=lambda: [64, 64])
    activation: Literal["tanh", "relu", "identity"] = "tanh"
    mode: Literal["probabilistic", "deterministic"] = "probabilistic"
    var_min: float = Field(1e-6, gt=0)
    var_max: float = Field(10.0, gt=0)

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, v: list[int]) -> list[int]:
        if any(w < 1 for w in v):
            raise ValueError("hidden layer widths must be >= 1")
        return v

    @model_validator(mode="after")
    def _variance_range(self) -> "ModelConfig":
        if self.var_min >= self.var_max:
            raise ValueError(f"var_min ({self.var_min}) must be below var_max ({self.var_max})")
        return self


class TrainConfig(_Section):
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(64, ge=1)
    seed: int = 0
    lr: float = Field(1e-3, gt=0)
    lr_min_ratio: float = Field(0.1, ge=0, le=1)  # cosine decay floor, as a fraction of lr
    nll_beta: float = Field(0.5, ge=0, le=1)  # NLL gradients scaled by var**nll_beta
    split_ratio: float = Field(0.7, gt=0, lt=1)


class EpochMetrics(BaseModel):
    epoch: int
    train_loss: float
    rmse_vx: float
    rmse_vy: float
    rmse_r: float
    rmse_total: float


class EvalReport(BaseModel):
    rmse_vx: float
    rmse_vy: float
    rmse_r: float
    rmse_total: float
    n_samples: int

    @classmethod
    def from_per_dim(cls, rmse_vx: float, rmse_vy: float, rmse_r: float, n_samples: int = 0) -> "EvalReport":
        total = math.sqrt((rmse_vx**2 + rmse_vy**2 + rmse_r**2) / 3.0)
        return cls(rmse_vx=rmse_vx, rmse_vy=rmse_vy, rmse_r=rmse_r, rmse_total=total, n_samples=n_samples)

    def as_rows(self) -> list[tuple[str, float, str]]:
        return [
            ("Total", self.rmse_total, "mixed"),
            ("v_x", self.rmse_vx, "m/s"),
            ("v_y", self.rmse_vy, "m/s"),
            ("r", self.rmse_r, "rad/s"),
        ]

    def to_text(self) -> str:
        lines = [f"RMSE over {self.n_samples} samples"]
        for name, value, unit in self.as_rows():
            label = name if unit == "mixed" else f"{name} [{unit}]"
            lines.append(f"  {label:<12} {value:.6f}")
        return "\n".join(lines)


class AblationRow(BaseModel):
    H: int
    rmse_total: float
    rmse_vx: float
    rmse_vy: float
    rmse_r: float
    best: bool = False


class AblationReport(BaseModel):
    rows: list[AblationRow]

    @property
    def best_H(self) -> int:
        return min(self.rows, key=lambda r: r.rmse_total).H


# ── Control ─────────────────────────────────────────────────────────


class MppiConfig(_Section):
    K: int = Field(512, ge=2)
    T: int = Field(25, ge=1)
    lambda_: float = Field(1.0, gt=0, alias="lambda")
    sigma: list[float] = Field(default_factory=lambda: [0.3, 0.3])
    seed: int = 0
    smoothing_window: int = Field(3, ge=1)  # 1 = no smoothing
    antithetic: bool = False

    @field_validator("sigma")
    @classmethod
    def _two_channels(cls, v: list[float]) -> list[float]:
        if len(v) != 2 or any(s < 0 for s in v):
            raise ValueError("sigma must hold two non-negative stds (steer, throttle)")
        return v


class CostConfig(_Section):
    w_track: float = Field(1.0, ge=0)
    w_speed: float = Field(0.1, ge=0)
    w_ctrl: float = Field(0.1, ge=0)
    w_unc: float = Field(5.0, ge=0)  # gamma
    jrd_threshold: Optional[float] = None  # delta; None -> quantile of training-set JRD
    jrd_quantile: float = Field(0.95, gt=0, lt=1)
    penalty_big: float = Field(10.0, ge=0)
    target_speed: float = Field(6.0, gt=0)
    v_limit: Optional[float] = Field(None, gt=0)  # explore speed envelope, off when None


# ── Experiments ─────────────────────────────────────────────────────

ManeuverKind = Literal["zigzag_low_speed", "high_speed_laps", "slide"]


class CollectConfig(_Section):
    minutes: float = Field(7.0, gt=0)
    episode_seconds: float = Field(35.0, gt=0)
    mix: list[ManeuverKind] = Field(
        default_factory=lambda: ["zigzag_low_speed", "high_speed_laps", "slide"]
    )


class ExploreConfig(_Section):
    n_rounds: int = Field(10, ge=1)
    steps_per_round: int = Field(600, ge=1)
    warmup_steps: int = Field(100, ge=1)
    policy: Literal["explore", "random"] = "explore"
    eval_minutes: float = Field(3.0, gt=0)
    retrain_epochs: int = Field(100, ge=1)
    start_speed: float = Field(3.0, ge=0)


class DeployConfig(_Section):
    laps: int = Field(1, ge=1)
    max_steps: int = Field(3000, ge=1)
    mode: Literal["direct", "safe"] = "safe"
    start_speed: float = Field(3.0, ge=0)


class IoConfig(_Section):
    data_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    out_dir: str = "runs/default"


class ExperimentConfig(_Section):
    seed: int = 0
    plant: PlantParams = Field(default_factory=PlantParams)
    track: TrackSpec = Field(default_factory=TrackSpec)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    mppi: MppiConfig = Field(default_factory=MppiConfig)
    costs: CostConfig = Field(default_factory=CostConfig)
    collect: CollectConfig = Field(default_factory=CollectConfig)
    explore: ExploreConfig = Field(default_factory=ExploreConfig)
    deploy: DeployConfig = Field(default_factory=DeployConfig)
    io: IoConfig = Field(default_factory=IoConfig)


# ── On-disk manifests ───────────────────────────────────────────────


class EpisodeEntry(BaseModel):
    file: str
    tag: str
    direction: Literal["ccw", "cw"] = "ccw"
    seed: int = 0
    duration: float
    rows: int
    truncated: bool = False


class DatasetManifest(BaseModel):
    format_version: int = 1
    dt: float = 0.1
    H: Optional[int] = None
    episodes: list[EpisodeEntry] = Field(default_factory=list)


class CheckpointHeader(BaseModel):
    format_version: int
    mode: Literal["probabilistic", "deterministic"]
    H: int = Field(ge=1)
    B: int = Field(ge=1)
    layer_sizes: list[int]
    activation: Literal["tanh", "relu", "identity"]
    dt: float
    var_min: float
    var_max: float


class RunManifest(BaseModel):
    command: str
    config_hash: str
    seed: int
    versions: dict[str, str]


class DeploySummary(BaseModel):
    mode: str
    completed: bool
    laps_completed: int
    steps: int
    mean_jrd: float
    max_jrd: float
    lap_time: Optional[float]
    max_abs_e_lat: float
    jrd_threshold: Optional[float]
    failure: Optional[str] = None


class LearningCurveRow(BaseModel):
    round: int
    cumulative_steps: int
    rmse_total: float
    rmse_vx: float
    rmse_vy: float
    rmse_r: float
    mean_jrd_pre: float


class ExploreState(BaseModel):
    policy: Literal["explore", "random"]
    completed_rounds: int = 0
    cumulative_steps: int = 0
    buffer_episodes: int = 0
    curve: list[LearningCurveRow] = Field(default_factory=list)
