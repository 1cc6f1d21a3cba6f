"""Small dense-network engine: initialisation, forward and backward passes, Adam.

Parameters are immutable dataclasses holding float64 arrays; every operation
returns new values instead of mutating its inputs, so many forwards can share
one parameter set while a single training loop owns the updates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from pennmpc.errors import ConfigError, ShapeError, TrainingError

Activation = Literal["tanh", "relu", "identity"]
ACTIVATIONS: tuple[str, ...] = ("tanh", "relu", "identity")


@dataclass(frozen=True)
class LayerParams:
    weights: np.ndarray  # [out_dim, in_dim]
    biases: np.ndarray  # [out_dim]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.biases.copy())


@dataclass(frozen=True)
class MlpParams:
    layers: tuple[LayerParams, ...]
    activations: tuple[str, ...]  # one per hidden layer
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "activations", tuple(self.activations))
        if not self.layers:
            raise ConfigError("an MLP needs at least one layer")
        if len(self.activations) != len(self.layers) - 1:
            raise ConfigError(
                f"expected {len(self.layers) - 1} hidden activations, got {len(self.activations)}"
            )
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}")
        for k, layer in enumerate(self.layers):
            if layer.biases.shape != (layer.out_dim,):
                raise ShapeError(f"layer {k}: biases {layer.biases.shape} do not match weights {layer.weights.shape}")
            if k > 0 and self.layers[k - 1].out_dim != layer.in_dim:
                raise ShapeError(
                    f"layer {k} expects {layer.in_dim} inputs but layer {k - 1} emits {self.layers[k - 1].out_dim}"
                )

    @property
    def layer_sizes(self) -> list[int]:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def activation(self) -> str:
        return self.activations[0] if self.activations else "identity"

    def copy(self) -> "MlpParams":
        return MlpParams(tuple(layer.copy() for layer in self.layers), self.activations, self.seed)

    def all_finite(self) -> bool:
        return all(np.isfinite(l.weights).all() and np.isfinite(l.biases).all() for l in self.layers)


MlpGrads = tuple[LayerParams, ...]


@dataclass(frozen=True)
class ForwardCache:
    inputs: tuple[np.ndarray, ...]  # activation entering each layer, [N, in_dim]
    pre_activations: tuple[np.ndarray, ...]  # affine output of each layer, [N, out_dim]
    layer_sizes: tuple[int, ...]
    squeeze: bool  # input was a single vector


@dataclass(frozen=True)
class AdamState:
    m: tuple[LayerParams, ...]
    v: tuple[LayerParams, ...]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MlpParams, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        zeros = tuple(
            LayerParams(np.zeros_like(l.weights), np.zeros_like(l.biases)) for l in params.layers
        )
        return cls(zeros, tuple(z.copy() for z in zeros), 0, lr, beta1, beta2, epsilon)


def init_params(layer_sizes: Sequence[int], activation: str = "tanh", seed: int = 0) -> MlpParams:
    """Uniform init with bound sqrt(3 / fan_in), i.e. weight variance 1 / fan_in; zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ConfigError(f"layer_sizes must list at least two positive sizes, got {list(layer_sizes)}")
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(3.0 / fan_in)
        layers.append(
            LayerParams(rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out))
        )
    return MlpParams(tuple(layers), (activation,) * (len(layers) - 1), seed)


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


def mlp_forward(params: MlpParams, inputs: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(inputs, dtype=np.float64)
    squeeze = x.ndim == 1
    a = x[None, :] if squeeze else x
    if a.ndim != 2 or a.shape[1] != params.layers[0].in_dim:
        raise ShapeError(f"input has shape {x.shape}, network expects {params.layers[0].in_dim} features")

    ins: list[np.ndarray] = []
    pres: list[np.ndarray] = []
    last = len(params.layers) - 1
    for k, layer in enumerate(params.layers):
        ins.append(a)
        z = a @ layer.weights.T + layer.biases
        pres.append(z)
        a = _activate(params.activations[k], z) if k < last else z

    cache = ForwardCache(tuple(ins), tuple(pres), tuple(params.layer_sizes), squeeze)
    return (a[0] if squeeze else a), cache


def mlp_backward(params: MlpParams, cache: ForwardCache, output_grad: np.ndarray) -> tuple[MlpGrads, np.ndarray]:
    """Reverse-mode gradients of the scalar whose d/d(output) is `output_grad`."""
    if tuple(params.layer_sizes) != cache.layer_sizes:
        raise ShapeError(f"cache built for layers {list(cache.layer_sizes)}, params have {params.layer_sizes}")
    g = np.asarray(output_grad, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :] if g.ndim == 1 else g
    expected = cache.pre_activations[-1].shape
    if g.shape != expected:
        raise ShapeError(f"output_grad has shape {g.shape}, forward produced {expected}")

    grads: list[LayerParams] = [None] * len(params.layers)  # type: ignore[list-item]
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        grads[k] = LayerParams(g.T @ cache.inputs[k], g.sum(axis=0))
        g = g @ layer.weights
        if k > 0:
            g = g * _activation_grad(params.activations[k - 1], cache.pre_activations[k - 1], cache.inputs[k])

    return tuple(grads), (g[0] if cache.squeeze else g)


def adam_step(params: MlpParams, grads: MlpGrads, state: AdamState) -> tuple[MlpParams, AdamState]:
    if len(grads) != len(params.layers):
        raise ShapeError(f"{len(grads)} gradient layers for {len(params.layers)} parameter layers")
    for k, (g, p) in enumerate(zip(grads, params.layers)):
        if g.weights.shape != p.weights.shape or g.biases.shape != p.biases.shape:
            raise ShapeError(f"layer {k}: gradient shapes do not match parameters")
        if not (np.isfinite(g.weights).all() and np.isfinite(g.biases).all()):
            raise TrainingError(f"non-finite gradient in layer {k} at Adam step {state.step + 1}")

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t

    def _update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray):
        m_new = b1 * m + (1.0 - b1) * g
        v_new = b2 * v + (1.0 - b2) * g * g
        m_hat = m_new / corr1
        v_hat = v_new / corr2
        return p - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon), m_new, v_new

    layers, ms, vs = [], [], []
    for p, g, m, v in zip(params.layers, grads, state.m, state.v):
        w, mw, vw = _update(p.weights, g.weights, m.weights, v.weights)
        b, mb, vb = _update(p.biases, g.biases, m.biases, v.biases)
        layers.append(LayerParams(w, b))
        ms.append(LayerParams(mw, mb))
        vs.append(LayerParams(vw, vb))

    new_params = MlpParams(tuple(layers), params.activations, params.seed)
    new_state = AdamState(tuple(ms), tuple(vs), t, state.lr, b1, b2, state.epsilon)
    return new_params, new_state
