"""Probabilistic ensemble dynamics model.

B independently initialised MLPs map a z-scored (state, action) history to a
diagonal Gaussian over the one-step state increment. The first three head
outputs are the normalised increment mean, the last three an unbounded value
squashed into [var_min, var_max] (normalised space). A deterministic variant
with a single member and an L2 objective serves as the baseline.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Union

import numpy as np
from pydantic import ValidationError
from scipy.special import expit

from pennmpc.core.nn import AdamState, LayerParams, MlpParams, adam_step, init_params, mlp_backward, mlp_forward
from pennmpc.errors import CheckpointError, DatasetError, ModelError, ShapeError, TrainingError
from pennmpc.models.domain import (
    DEFAULT_DT,
    PAIR_DIM,
    STATE_DIM,
    HistoryWindow,
    NormStats,
    SampleBatch,
    flatten_windows,
)
from pennmpc.models.schemas import CheckpointHeader, EpochMetrics, EvalReport, ModelConfig, TrainConfig
from pennmpc.services.dataset_store import compute_norm_stats
from pennmpc.services.uncertainty import MixtureSummary, jrd, jrd_batch

logger = logging.getLogger(__name__)

PROBABILISTIC = "probabilistic"
DETERMINISTIC = "deterministic"
CHECKPOINT_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianPrediction:
    mean: np.ndarray  # [3]
    variance: np.ndarray  # [3]


@dataclass(frozen=True)
class EnsemblePrediction:
    members: tuple[GaussianPrediction, ...]

    def mixture(self) -> MixtureSummary:
        return MixtureSummary.from_arrays(
            np.stack([m.mean for m in self.members]), np.stack([m.variance for m in self.members])
        )

    def jrd(self) -> float:
        return jrd(self.mixture())


@dataclass(frozen=True)
class PennModel:
    members: tuple[MlpParams, ...]
    stats: NormStats
    H: int
    mode: str = PROBABILISTIC
    var_min: float = 1e-6
    var_max: float = 10.0
    dt: float = DEFAULT_DT

    def __post_init__(self) -> None:
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ModelError("an ensemble needs at least one member")
        if self.mode not in (PROBABILISTIC, DETERMINISTIC):
            raise ModelError(f"unknown model mode {self.mode!r}")
        sizes = self.members[0].layer_sizes
        for i, m in enumerate(self.members[1:], start=1):
            if m.layer_sizes != sizes or m.activations != self.members[0].activations:
                raise ModelError(f"member {i} architecture {m.layer_sizes} differs from member 0 {sizes}")
        if sizes[0] != self.H * PAIR_DIM:
            raise ShapeError(f"members take {sizes[0]} inputs, H={self.H} needs {self.H * PAIR_DIM}")
        if sizes[-1] != self.output_dim:
            raise ShapeError(f"{self.mode} members need {self.output_dim} outputs, got {sizes[-1]}")
        if self.stats.H != self.H:
            raise ShapeError(f"normalisation stats are for H={self.stats.H}, model has H={self.H}")
        if not 0 < self.var_min < self.var_max:
            raise ModelError(f"need 0 < var_min < var_max, got {self.var_min}, {self.var_max}")

    @property
    def B(self) -> int:
        return len(self.members)

    @property
    def output_dim(self) -> int:
        return 2 * STATE_DIM if self.mode == PROBABILISTIC else STATE_DIM

    @property
    def layer_sizes(self) -> list[int]:
        return self.members[0].layer_sizes

    @property
    def activation(self) -> str:
        return self.members[0].activation


def _member_seed(seed: int, member: int) -> int:
    return int(np.random.SeedSequence([seed, member]).generate_state(1)[0])


def init_model(cfg: ModelConfig, stats: NormStats | None = None, seed: int = 0, dt: float = DEFAULT_DT) -> PennModel:
    n_out = 2 * STATE_DIM if cfg.mode == PROBABILISTIC else STATE_DIM
    B = cfg.B if cfg.mode == PROBABILISTIC else 1
    sizes = [cfg.H * PAIR_DIM, *cfg.hidden, n_out]
    members = tuple(init_params(sizes, cfg.activation, _member_seed(seed, b)) for b in range(B))
    return PennModel(
        members=members,
        stats=stats if stats is not None else NormStats.identity(cfg.H),
        H=cfg.H,
        mode=cfg.mode,
        var_min=cfg.var_min,
        var_max=cfg.var_max,
        dt=dt,
    )


# =====================================================================
# Inputs and heads
# =====================================================================


def build_input(window: HistoryWindow, stats: NormStats) -> np.ndarray:
    if window.H != stats.H:
        raise ShapeError(f"window has H={window.H}, statistics expect H={stats.H}")
    return (flatten_windows(window.states, window.actions) - stats.input_mean) / stats.input_std


def build_input_batch(states: np.ndarray, actions: np.ndarray, stats: NormStats) -> np.ndarray:
    if states.shape[-2] != stats.H:
        raise ShapeError(f"windows have H={states.shape[-2]}, statistics expect H={stats.H}")
    return (flatten_windows(states, actions) - stats.input_mean) / stats.input_std


def bounded_variance(raw: np.ndarray, var_min: float, var_max: float) -> tuple[np.ndarray, np.ndarray]:
    """var = var_min + (var_max - var_min) * sigmoid(raw), hitting both bounds exactly; returns (var, dvar/draw)."""
    s, one_minus_s = expit(raw), expit(-raw)
    var = var_min * one_minus_s + var_max * s
    return var, (var_max - var_min) * s * one_minus_s


def _heads(model: PennModel, params: MlpParams, features: np.ndarray, check_finite: bool):
    out, _ = mlp_forward(params, features)
    if check_finite and not np.isfinite(out).all():
        raise ModelError("member produced non-finite head outputs")
    stats = model.stats
    mean = out[..., :STATE_DIM] * stats.target_std + stats.target_mean
    if model.mode == PROBABILISTIC:
        var_norm, _ = bounded_variance(out[..., STATE_DIM:], model.var_min, model.var_max)
    else:
        var_norm = np.full_like(mean, model.var_min)
    return mean, var_norm * stats.target_std**2


def predict_member(model: PennModel, member_idx: int, features: np.ndarray) -> GaussianPrediction:
    """Increment distribution of one member, de-normalised to raw units."""
    if not 0 <= member_idx < model.B:
        raise ModelError(f"member index {member_idx} out of range for B={model.B}")
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (model.H * PAIR_DIM,):
        raise ShapeError(f"expected {model.H * PAIR_DIM} features, got {features.shape}")
    mean, var = _heads(model, model.members[member_idx], features, check_finite=True)
    return GaussianPrediction(mean, var)


def predict_members(model: PennModel, features: np.ndarray, check_finite: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Every member on a [N, H*5] batch; returns increment means and variances, each [B, N, 3]."""
    heads = [_heads(model, p, features, check_finite) for p in model.members]
    return np.stack([h[0] for h in heads]), np.stack([h[1] for h in heads])


def predict_ensemble(model: PennModel, window: HistoryWindow) -> EnsemblePrediction:
    """Next-state Gaussians N(x + dmean, dvar) per member, in member-index order."""
    if model.mode != PROBABILISTIC:
        raise ModelError("a deterministic model has no ensemble; uncertainty is only available in probabilistic mode")
    features = build_input(window, model.stats)
    current = window.current_state
    members = []
    for idx in range(model.B):
        p = predict_member(model, idx, features)
        members.append(GaussianPrediction(current + p.mean, p.variance))
    return EnsemblePrediction(tuple(members))


def window_jrd(model: PennModel, window: HistoryWindow) -> float:
    """Disagreement of the ensemble on one window; 0 when there is nothing to disagree."""
    if model.mode != PROBABILISTIC or model.B < 2:
        return 0.0
    return predict_ensemble(model, window).jrd()


def batch_jrd(model: PennModel, dataset: SampleBatch) -> np.ndarray:
    """Per-sample JRD of the one-step predictions over a dataset, [N]."""
    if model.mode != PROBABILISTIC or model.B < 2:
        return np.zeros(len(dataset))
    means, variances = predict_members(model, build_input_batch(dataset.states, dataset.actions, model.stats))
    return jrd_batch(np.swapaxes(means, 0, 1), np.swapaxes(variances, 0, 1))


# =====================================================================
# Losses
# =====================================================================


def nll_loss(mean: np.ndarray, variance: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Gaussian NLL summed over dims, averaged over rows; returns (loss, dL/dmean, dL/dvariance)."""
    mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
    variance = np.atleast_2d(np.asarray(variance, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if mean.shape != variance.shape or mean.shape != target.shape:
        raise ShapeError(f"mean {mean.shape}, variance {variance.shape}, target {target.shape} must agree")
    if not (variance > 0).all():
        raise ModelError("NLL needs strictly positive variances")
    n = mean.shape[0]
    err = target - mean
    loss = 0.5 * float((err * err / variance + np.log(variance) + _LOG_2PI).sum()) / n
    grad_mean = -err / variance / n
    grad_var = 0.5 * (1.0 / variance - err * err / variance**2) / n
    return loss, grad_mean, grad_var


def l2_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over the three targets (and rows)."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} must agree")
    diff = pred - target
    return float((diff * diff).mean()), 2.0 * diff / diff.size


def member_loss_and_grads(params: MlpParams, features: np.ndarray, targets: np.ndarray, mode: str,
                          var_min: float, var_max: float, nll_beta: float = 0.0) -> tuple[float, tuple[LayerParams, ...]]:
    """Loss of one member on normalised data and its parameter gradients.

    With `nll_beta` > 0 every NLL gradient entry is scaled by var**nll_beta, the variance held
    constant. The returned loss stays the plain NLL. At nll_beta = 1 the mean head follows the
    squared-error gradient.
    """
    out, cache = mlp_forward(params, features)
    if mode == PROBABILISTIC:
        var, dvar_draw = bounded_variance(out[:, STATE_DIM:], var_min, var_max)
        loss, g_mean, g_var = nll_loss(out[:, :STATE_DIM], var, targets)
        if nll_beta:
            scale = var**nll_beta
            g_mean, g_var = g_mean * scale, g_var * scale
        g_out = np.concatenate([g_mean, g_var * dvar_draw], axis=1)
    else:
        loss, g_out = l2_loss(out, targets)
    grads, _ = mlp_backward(params, cache, g_out)
    return loss, grads


# =====================================================================
# Training and evaluation
# =====================================================================


@dataclass
class TrainingResult:
    history: list[EpochMetrics]
    best_model: PennModel
    best_epoch: int
    final_model: PennModel

    @property
    def best_report(self) -> EpochMetrics:
        return self.history[self.best_epoch - 1]


def cosine_lr(epoch: int, epochs: int, lr: float, lr_min: float) -> float:
    """Cosine decay from `lr` at epoch 1 to `lr_min` at the last epoch."""
    if epochs <= 1:
        return lr
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * (epoch - 1) / (epochs - 1)))


def train(model: PennModel, train_set: SampleBatch, test_set: SampleBatch, config: TrainConfig) -> TrainingResult:
    """Minibatch Adam per member on its own bootstrap resample; keeps the epoch with the lowest pooled test RMSE."""
    if len(train_set) == 0 or len(test_set) == 0:
        raise DatasetError(f"train/test sets must be non-empty (got {len(train_set)}/{len(test_set)})")
    if train_set.H != model.H or test_set.H != model.H:
        raise ShapeError(f"datasets are windowed at H={train_set.H}/{test_set.H}, model has H={model.H}")

    stats = compute_norm_stats(train_set)
    model = replace(model, stats=stats)
    features = build_input_batch(train_set.states, train_set.actions, stats)
    targets = (train_set.targets - stats.target_mean) / stats.target_std
    n = len(train_set)

    members = list(model.members)
    optims = [AdamState.zeros_like(p, lr=config.lr) for p in members]
    bootstrap = model.mode == PROBABILISTIC and model.B > 1
    samples_of = [
        np.random.default_rng([config.seed, 1, b]).integers(0, n, size=n) if bootstrap else np.arange(n)
        for b in range(model.B)
    ]
    shufflers = [np.random.default_rng([config.seed, 2, b]) for b in range(model.B)]

    history: list[EpochMetrics] = []
    best_model, best_epoch, best_rmse = model, 0, math.inf
    log_every = max(1, config.epochs // 10)

    for epoch in range(1, config.epochs + 1):
        lr = cosine_lr(epoch, config.epochs, config.lr, config.lr * config.lr_min_ratio)
        optims = [replace(o, lr=lr) for o in optims]
        member_losses = []
        for b in range(model.B):
            order = samples_of[b][shufflers[b].permutation(n)]
            batch_losses = []
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                loss, grads = member_loss_and_grads(
                    members[b], features[idx], targets[idx], model.mode, model.var_min, model.var_max, config.nll_beta
                )
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, member {b}, batch starting {start}")
                members[b], optims[b] = adam_step(members[b], grads, optims[b])
                batch_losses.append(loss)
            member_losses.append(float(np.mean(batch_losses)))

        current = replace(model, members=tuple(members))
        report = evaluate_rmse(current, test_set)
        history.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=float(np.mean(member_losses)),
                rmse_vx=report.rmse_vx,
                rmse_vy=report.rmse_vy,
                rmse_r=report.rmse_r,
                rmse_total=report.rmse_total,
            )
        )
        if report.rmse_total < best_rmse:
            best_model, best_epoch, best_rmse = current, epoch, report.rmse_total
        if epoch % log_every == 0 or epoch == config.epochs:
            logger.info(
                "epoch %d/%d: train loss %.5f, test RMSE %.5f (best %.5f @ %d)",
                epoch, config.epochs, history[-1].train_loss, report.rmse_total, best_rmse, best_epoch,
            )

    return TrainingResult(history, best_model, best_epoch, replace(model, members=tuple(members)))


def evaluate_rmse(model: PennModel, dataset: SampleBatch) -> EvalReport:
    """One-step next-state RMSE of the ensemble mean, per dimension and pooled, in raw units."""
    if len(dataset) == 0:
        raise DatasetError("cannot evaluate on an empty dataset")
    if dataset.H != model.H:
        raise ShapeError(f"dataset is windowed at H={dataset.H}, model has H={model.H}")
    features = build_input_batch(dataset.states, dataset.actions, model.stats)
    means, _ = predict_members(model, features)
    err = means.mean(axis=0) - dataset.targets
    sq = err * err
    per_dim = np.sqrt(sq.mean(axis=0))
    return EvalReport(
        rmse_vx=float(per_dim[0]),
        rmse_vy=float(per_dim[1]),
        rmse_r=float(per_dim[2]),
        rmse_total=float(np.sqrt(sq.mean())),
        n_samples=len(dataset),
    )


# =====================================================================
# Checkpoints
# =====================================================================


def _hex(a: np.ndarray) -> list:
    if a.ndim == 1:
        return [float(v).hex() for v in a]
    return [_hex(row) for row in a]


def _unhex(values: list, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.array([float.fromhex(v) for v in np.asarray(values, dtype=object).ravel()], dtype=np.float64)
    if arr.size != int(np.prod(shape)):
        raise CheckpointError(f"array has {arr.size} entries, header implies shape {shape}")
    return arr.reshape(shape)


def save_checkpoint(model: PennModel, path: Union[str, Path]) -> None:
    header = CheckpointHeader(
        format_version=CHECKPOINT_VERSION,
        mode=model.mode,
        H=model.H,
        B=model.B,
        layer_sizes=model.layer_sizes,
        activation=model.activation,
        dt=model.dt,
        var_min=model.var_min,
        var_max=model.var_max,
    )
    doc = {
        "header": header.model_dump(),
        "norm_stats": {
            "input_mean": _hex(model.stats.input_mean),
            "input_std": _hex(model.stats.input_std),
            "target_mean": _hex(model.stats.target_mean),
            "target_std": _hex(model.stats.target_std),
        },
        "members": [
            {
                "seed": int(m.seed),
                "layers": [{"weights": _hex(l.weights), "biases": _hex(l.biases)} for l in m.layers],
            }
            for m in model.members
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path: Union[str, Path]) -> PennModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc.msg} at line {exc.lineno}") from exc

    try:
        raw_header = doc["header"]
        version = raw_header.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint {path} has format_version {version}, expected {CHECKPOINT_VERSION}")
        header = CheckpointHeader.model_validate(raw_header)
        H, sizes = header.H, header.layer_sizes
        n_in = H * PAIR_DIM
        stats_doc = doc["norm_stats"]
        stats = NormStats(
            _unhex(stats_doc["input_mean"], (n_in,)),
            _unhex(stats_doc["input_std"], (n_in,)),
            _unhex(stats_doc["target_mean"], (STATE_DIM,)),
            _unhex(stats_doc["target_std"], (STATE_DIM,)),
        )
        if len(doc["members"]) != header.B:
            raise CheckpointError(f"header declares B={header.B}, file holds {len(doc['members'])} members")
        members = []
        for m in doc["members"]:
            if len(m["layers"]) != len(sizes) - 1:
                raise CheckpointError(f"member has {len(m['layers'])} layers, header implies {len(sizes) - 1}")
            layers = tuple(
                LayerParams(_unhex(l["weights"], (n_out, n_prev)), _unhex(l["biases"], (n_out,)))
                for l, n_prev, n_out in zip(m["layers"], sizes[:-1], sizes[1:])
            )
            members.append(MlpParams(layers, (header.activation,) * (len(layers) - 1), int(m["seed"])))
        return PennModel(
            members=tuple(members),
            stats=stats,
            H=H,
            mode=header.mode,
            var_min=header.var_min,
            var_max=header.var_max,
            dt=header.dt,
        )
    except CheckpointError:
        raise
    except ValidationError as exc:
        raise CheckpointError(f"invalid checkpoint header in {path}: {exc.errors()[0]['msg']}") from exc
    except (KeyError, TypeError, ValueError, AttributeError, ShapeError, ModelError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc!r}") from exc
