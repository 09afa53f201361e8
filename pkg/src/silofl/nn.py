"""Minimal dense neural network core with reverse-mode differentiation.

Networks are stacks of dense and relu layers described by a NetworkSpec;
parameters live in a ParamSet (named map, deterministic iteration order).
All arrays are float64 and all operations are pure functions, so values can
be shared freely across concurrent workers.

The per-element work of the forward and backward passes runs on the active
kernel backend (compiled extension or numpy fallback, see silofl._kernels).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from . import _kernels as K


class ShapeMismatchError(ValueError):
    """Input/parameter shape incompatible with a layer; carries the layer id."""

    def __init__(self, layer_id: str, message: str):
        super().__init__(f"{layer_id}: {message}")
        self.layer_id = layer_id


class CongruenceError(ValueError):
    """Two parameter collections do not share the same structure."""


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    bias: bool = True


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class SoftmaxXentHead:
    """Marker for a classifier head; forward passes logits through unchanged."""


Layer = Dense | Relu | SoftmaxXentHead


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        if not any(isinstance(l, Dense) for l in self.layers):
            raise ValueError("network needs at least one dense layer")
        dim = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if layer.in_dim < 1 or layer.out_dim < 1:
                    raise ValueError(f"layer {i}: non-positive dense dimensions")
                if dim is not None and layer.in_dim != dim:
                    raise ValueError(
                        f"layer {i}: dense expects {layer.in_dim} inputs, previous layer emits {dim}"
                    )
                dim = layer.out_dim

    @property
    def in_dim(self) -> int:
        return next(l for l in self.layers if isinstance(l, Dense)).in_dim

    @property
    def out_dim(self) -> int:
        return [l for l in self.layers if isinstance(l, Dense)][-1].out_dim

    def dense_ids(self) -> list[str]:
        return [f"dense{i:02d}" for i, l in enumerate(self.layers) if isinstance(l, Dense)]


def mlp(dims: Sequence[int], classifier: bool = True) -> NetworkSpec:
    """Dense/relu stack through the given dims, e.g. (196, 32, 10)."""
    layers: list[Layer] = []
    for a, b in zip(dims[:-1], dims[1:]):
        layers.append(Dense(a, b))
        layers.append(Relu())
    layers.pop()  # no relu after the final dense
    if classifier:
        layers.append(SoftmaxXentHead())
    return NetworkSpec(tuple(layers))


class ParamSet:
    """Named map layer-id -> (weight, optional bias); iterates sorted by id.

    Values are treated as immutable: every operation returns a fresh ParamSet.
    The same class stores gradients (GradSet), which are structurally
    congruent to the parameters they differentiate.
    """

    def __init__(self, entries: dict[str, tuple[np.ndarray, Optional[np.ndarray]]]):
        self._entries = dict(sorted(entries.items()))

    def items(self) -> Iterator[tuple[str, tuple[np.ndarray, Optional[np.ndarray]]]]:
        return iter(self._entries.items())

    def __getitem__(self, key: str) -> tuple[np.ndarray, Optional[np.ndarray]]:
        return self._entries[key]

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def ids(self) -> list[str]:
        return list(self._entries)

    def copy(self) -> "ParamSet":
        return ParamSet(
            {k: (w.copy(), None if b is None else b.copy()) for k, (w, b) in self.items()}
        )

    def congruent(self, other: "ParamSet") -> bool:
        if self.ids() != other.ids():
            return False
        for k, (w, b) in self.items():
            ow, ob = other[k]
            if w.shape != ow.shape or (b is None) != (ob is None):
                return False
            if b is not None and b.shape != ob.shape:
                return False
        return True

    def flat(self) -> np.ndarray:
        """All values concatenated in iteration order (weights then bias per layer)."""
        parts = []
        for _, (w, b) in self.items():
            parts.append(w.ravel())
            if b is not None:
                parts.append(b.ravel())
        return np.concatenate(parts)


GradSet = ParamSet


def _require_congruent(a: ParamSet, b: ParamSet) -> None:
    if not a.congruent(b):
        raise CongruenceError("parameter structures do not match")


def zeros_like(params: ParamSet) -> ParamSet:
    return ParamSet(
        {
            k: (np.zeros_like(w), None if b is None else np.zeros_like(b))
            for k, (w, b) in params.items()
        }
    )


def map2(f, a: ParamSet, b: ParamSet) -> ParamSet:
    """Elementwise binary combination of two congruent sets."""
    _require_congruent(a, b)
    out = {}
    for k, (w, bias) in a.items():
        ow, obias = b[k]
        out[k] = (f(w, ow), None if bias is None else f(bias, obias))
    return ParamSet(out)


def combine(grads: Sequence[ParamSet], weights: Sequence[float]) -> ParamSet:
    """Weighted sum of congruent grad sets, in the order given."""
    if not grads:
        raise ValueError("nothing to combine")
    acc = zeros_like(grads[0])
    for g, wt in zip(grads, weights):
        acc = map2(lambda x, y: x + wt * y, acc, g)
    return acc


def grad_norm(grads: ParamSet) -> float:
    return float(np.sqrt(sum(float(np.sum(w * w)) + (0.0 if b is None else float(np.sum(b * b)))
                             for _, (w, b) in grads.items())))


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> ParamSet:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    entries = {}
    for i, layer in enumerate(spec.layers):
        if not isinstance(layer, Dense):
            continue
        bound = math.sqrt(6.0 / (layer.in_dim + layer.out_dim))
        w = rng.uniform(-bound, bound, size=(layer.in_dim, layer.out_dim))
        b = np.zeros(layer.out_dim) if layer.bias else None
        entries[f"dense{i:02d}"] = (w, b)
    return ParamSet(entries)


def _as_batch(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"batch must be 2-d (rows, features), got shape {x.shape}")
    return x


def _run_forward(spec: NetworkSpec, params: ParamSet, batch: np.ndarray, keep_trace: bool):
    """Returns (logits, trace); trace holds each layer's input (pre-activation for relu)."""
    x = _as_batch(batch)
    trace = [] if keep_trace else None
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            lid = f"dense{i:02d}"
            w, b = params[lid]
            if x.shape[1] != w.shape[0]:
                raise ShapeMismatchError(
                    lid, f"expected {w.shape[0]} input features, got {x.shape[1]}"
                )
            if keep_trace:
                trace.append(x)
            x = K.dense_forward(x, w, b)
        elif isinstance(layer, Relu):
            if keep_trace:
                trace.append(x)
            x = K.relu_forward(x)
        # SoftmaxXentHead passes logits through
    return x, trace


def forward(spec: NetworkSpec, params: ParamSet, batch: np.ndarray) -> np.ndarray:
    """Logits for a batch; pure function of its inputs."""
    logits, _ = _run_forward(spec, params, batch, keep_trace=False)
    return logits


def _run_backward(
    spec: NetworkSpec, params: ParamSet, trace: list, dlogits: np.ndarray
) -> tuple[GradSet, np.ndarray]:
    g = np.ascontiguousarray(dlogits, dtype=np.float64)
    grads: dict[str, tuple[np.ndarray, Optional[np.ndarray]]] = {}
    ti = len(trace)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        if isinstance(layer, SoftmaxXentHead):
            continue
        ti -= 1
        x_in = trace[ti]
        if isinstance(layer, Dense):
            lid = f"dense{i:02d}"
            w, b = params[lid]
            g, gw, gb = K.dense_backward(x_in, w, g)
            grads[lid] = (gw, gb if b is not None else None)
        elif isinstance(layer, Relu):
            g = K.relu_backward(x_in, g)
    return ParamSet(grads), g


def backprop(
    spec: NetworkSpec, params: ParamSet, batch: np.ndarray, dlogits: np.ndarray
) -> tuple[GradSet, np.ndarray]:
    """Reverse-mode pass from a logits cotangent; returns (GradSet, d/d batch)."""
    _, trace = _run_forward(spec, params, batch, keep_trace=True)
    return _run_backward(spec, params, trace, dlogits)


def loss_and_grad(
    spec: NetworkSpec, params: ParamSet, batch: np.ndarray, labels: np.ndarray
) -> tuple[float, GradSet]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    n_classes = spec.out_dim
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    logits, trace = _run_forward(spec, params, batch, keep_trace=True)
    loss, dlogits = K.softmax_xent(logits, labels)
    grads, _ = _run_backward(spec, params, trace, dlogits)
    return loss, grads


def predict(spec: NetworkSpec, params: ParamSet, batch: np.ndarray) -> np.ndarray:
    return np.argmax(forward(spec, params, batch), axis=1)


def sgd_step(params: ParamSet, grads: GradSet, lr: float) -> ParamSet:
    if lr < 0:
        raise ValueError("lr must be non-negative")
    return map2(lambda p, g: p - lr * g, params, grads)


@dataclass(frozen=True)
class OptimState:
    """Optimizer state; 'sgd' is stateless, 'adam' carries bias-corrected moments."""

    kind: str
    m: Optional[ParamSet] = None
    v: Optional[ParamSet] = None
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def make_optimizer(kind: str, params: ParamSet, **kwargs) -> OptimState:
    if kind == "sgd":
        return OptimState(kind="sgd")
    if kind == "adam":
        return OptimState(kind="adam", m=zeros_like(params), v=zeros_like(params), **kwargs)
    raise ValueError(f"unknown optimizer kind {kind!r}")


def adam_step(
    state: OptimState, params: ParamSet, grads: GradSet, lr: float
) -> tuple[OptimState, ParamSet]:
    """Standard bias-corrected adam update; returns (new state, new params)."""
    if state.kind != "adam":
        raise ValueError("adam_step needs an adam OptimState")
    if lr <= 0:
        raise ValueError("lr must be positive")
    _require_congruent(params, grads)
    _require_congruent(params, state.m)
    t = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    m = map2(lambda mm, g: b1 * mm + (1 - b1) * g, state.m, grads)
    v = map2(lambda vv, g: b2 * vv + (1 - b2) * g * g, state.v, grads)
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    upd = map2(lambda mm, vv: (mm / c1) / (np.sqrt(vv / c2) + eps), m, v)
    new_params = map2(lambda p, u: p - lr * u, params, upd)
    return (
        OptimState(kind="adam", m=m, v=v, step=t, beta1=b1, beta2=b2, eps=eps),
        new_params,
    )


def optimizer_step(
    state: OptimState, params: ParamSet, grads: GradSet, lr: float
) -> tuple[OptimState, ParamSet]:
    if state.kind == "sgd":
        return state, sgd_step(params, grads, lr)
    return adam_step(state, params, grads, lr)


def ema_update(theta_t: ParamSet, theta_prev: ParamSet, zeta: float) -> ParamSet:
    """Elementwise zeta*theta_t + (1-zeta)*theta_prev."""
    if not 0.0 <= zeta <= 1.0:
        raise ValueError("zeta must lie in [0, 1]")
    return map2(lambda a, b: zeta * a + (1.0 - zeta) * b, theta_t, theta_prev)


def cosine_lr(t: int, total_rounds: int, cycles: int, lr_max: float, lr_min: float) -> float:
    """Half-cosine annealing with warm restarts every ceil(total/cycles) rounds.

    Round indices are 1-based; the value at each cycle start is lr_max and is
    non-increasing within a cycle.
    """
    if not 1 <= t <= total_rounds:
        raise ValueError("round index out of range")
    if cycles < 1:
        raise ValueError("cycles must be >= 1")
    if not lr_max >= lr_min >= 0.0:
        raise ValueError("need lr_max >= lr_min >= 0")
    cycle_len = math.ceil(total_rounds / cycles)
    p = ((t - 1) % cycle_len) / cycle_len
    return lr_min + (lr_max - lr_min) * (1.0 + math.cos(math.pi * p)) / 2.0
