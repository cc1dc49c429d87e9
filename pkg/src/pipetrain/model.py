"""Layered dense/relu/softmax-cross-entropy model with hand-written gradients.

All arithmetic is float64 on plain numpy arrays so that independent
re-computations of the same expressions agree bit-for-bit. Parameters live
outside the layer graph in versioned, immutable WeightSet values: an
optimizer step or an aggregation returns a new set and strictly increases
the version number, which makes weight stashing and replication checks
exact byte/array comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DENSE = "dense"
RELU = "relu"
SOFTMAX_XENT = "softmax_xent"

LAYER_KINDS = (DENSE, RELU, SOFTMAX_XENT)


class ShapeError(ValueError):
    """Tensor or layer dimensions do not line up."""


class StashViolation(RuntimeError):
    """A backward pass used a different weight version than its forward pass."""


def _frozen(arr) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Tensor:
    """Row-major float64 value; every entry must be finite."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ShapeError("tensor entries must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size


def as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class Layer:
    """One model layer. Only dense layers carry parameters.

    ``init_weights``/``init_bias`` optionally pin the initial parameter
    values (e.g. an identity-initialized dense layer); otherwise seeded
    random initialization is used.
    """

    kind: str
    in_dim: int
    out_dim: int
    init_weights: np.ndarray | None = None
    init_bias: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ShapeError("layer dims must be positive")
        if self.kind in (RELU, SOFTMAX_XENT):
            if self.in_dim != self.out_dim:
                raise ShapeError(f"{self.kind} layer must preserve its dimension")
            if self.init_weights is not None or self.init_bias is not None:
                raise ShapeError(f"{self.kind} layer takes no parameters")
        if self.init_weights is not None:
            w = np.asarray(self.init_weights, dtype=np.float64)
            if w.shape != (self.in_dim, self.out_dim):
                raise ShapeError("explicit weights have wrong shape")
            object.__setattr__(self, "init_weights", _frozen(w))
        if self.init_bias is not None:
            b = np.asarray(self.init_bias, dtype=np.float64)
            if b.shape != (self.out_dim,):
                raise ShapeError("explicit bias has wrong shape")
            object.__setattr__(self, "init_bias", _frozen(b))

    @property
    def has_params(self) -> bool:
        return self.kind == DENSE


@dataclass(frozen=True)
class LayerStack:
    """Ordered trainable layers, indexed 0..L-1."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) < 2:
            raise ShapeError("a stack needs at least 2 layers")
        for j in range(len(self.layers) - 1):
            if self.layers[j].out_dim != self.layers[j + 1].in_dim:
                raise ShapeError(
                    f"layer {j} out_dim {self.layers[j].out_dim} != "
                    f"layer {j + 1} in_dim {self.layers[j + 1].in_dim}"
                )

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def depth(self) -> int:
        return len(self.layers)


def build_stack(layer_dims: list[int]) -> LayerStack:
    """dense/relu chain over the given widths, ending in softmax-cross-entropy.

    ``[10, 16, 3]`` builds dense(10,16), relu, dense(16,3), softmax_xent.
    """
    if len(layer_dims) < 2:
        raise ShapeError("need at least input and output widths")
    layers: list[Layer] = []
    for i in range(len(layer_dims) - 1):
        a, b = layer_dims[i], layer_dims[i + 1]
        layers.append(Layer(DENSE, a, b))
        if i < len(layer_dims) - 2:
            layers.append(Layer(RELU, b, b))
    out = layer_dims[-1]
    layers.append(Layer(SOFTMAX_XENT, out, out))
    return LayerStack(tuple(layers))


ParamPair = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class WeightSet:
    """Versioned parameters (and momentum buffers) for layers [start, end].

    Immutable once built; safe to share across executor threads.
    """

    start: int
    end: int
    version: int
    params: tuple[ParamPair | None, ...]
    velocity: tuple[ParamPair | None, ...]

    def __post_init__(self):
        if self.end < self.start or self.version < 0:
            raise ShapeError("bad weight range or version")
        n = self.end - self.start + 1
        if len(self.params) != n or len(self.velocity) != n:
            raise ShapeError("params/velocity not aligned with layer range")

    def covers(self, start: int, end: int) -> bool:
        return self.start <= start and end <= self.end

    def layer_params(self, j: int) -> ParamPair | None:
        return self.params[j - self.start]

    def layer_velocity(self, j: int) -> ParamPair | None:
        return self.velocity[j - self.start]


def initial_weights(stack: LayerStack, rng: np.random.Generator) -> WeightSet:
    """Seeded version-0 weights for the full stack.

    Dense layers draw W ~ N(0, 1/sqrt(in_dim)) unless the layer pins
    explicit values; biases start at zero, velocities at zero.
    """
    params: list[ParamPair | None] = []
    vel: list[ParamPair | None] = []
    for layer in stack.layers:
        if not layer.has_params:
            params.append(None)
            vel.append(None)
            continue
        if layer.init_weights is not None:
            w = layer.init_weights
        else:
            std = 1.0 / math.sqrt(layer.in_dim)
            w = _frozen(rng.normal(0.0, std, size=(layer.in_dim, layer.out_dim)))
        b = layer.init_bias if layer.init_bias is not None else _frozen(np.zeros(layer.out_dim))
        params.append((w, b))
        vel.append((_frozen(np.zeros_like(w)), _frozen(np.zeros_like(b))))
    return WeightSet(0, len(stack) - 1, 0, tuple(params), tuple(vel))


def slice_weights(ws: WeightSet, start: int, end: int, version: int | None = None) -> WeightSet:
    if not ws.covers(start, end):
        raise ShapeError(f"weights [{ws.start},{ws.end}] do not cover [{start},{end}]")
    lo, hi = start - ws.start, end - ws.start + 1
    return WeightSet(
        start,
        end,
        ws.version if version is None else version,
        ws.params[lo:hi],
        ws.velocity[lo:hi],
    )


def merge_weights(parts: list[WeightSet], version: int = 0) -> WeightSet:
    """Concatenate contiguous per-stage sets back into one full-range set."""
    parts = sorted(parts, key=lambda w: w.start)
    for a, b in zip(parts, parts[1:]):
        if b.start != a.end + 1:
            raise ShapeError("weight parts are not contiguous")
    params: list[ParamPair | None] = []
    vel: list[ParamPair | None] = []
    for p in parts:
        params.extend(p.params)
        vel.extend(p.velocity)
    return WeightSet(parts[0].start, parts[-1].end, version, tuple(params), tuple(vel))


@dataclass(frozen=True)
class ActivationRecord:
    """Everything backward needs from a forward over [start, end]."""

    start: int
    end: int
    version: int
    caches: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class GradientSet:
    """Per-layer gradients, shape-congruent with the owning WeightSet."""

    start: int
    end: int
    batch_id: int
    grads: tuple[ParamPair | None, ...]


def _layer_forward(layer: Layer, pair: ParamPair | None, x: np.ndarray):
    if layer.kind == DENSE:
        w, b = pair
        return x @ w + b, x
    if layer.kind == RELU:
        return np.maximum(x, 0.0), x
    # softmax rows, numerically stable
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs, probs


def _layer_backward(layer: Layer, pair: ParamPair | None, cache: np.ndarray, g: np.ndarray):
    if layer.kind == DENSE:
        w, _ = pair
        gw = cache.T @ g
        gb = g.sum(axis=0)
        return g @ w.T, (gw, gb)
    if layer.kind == RELU:
        return g * (cache > 0), None
    # softmax Jacobian applied to an upstream gradient w.r.t. the probabilities
    probs = cache
    s = (g * probs).sum(axis=1, keepdims=True)
    return probs * (g - s), None


def forward_range(
    stack: LayerStack,
    weights: WeightSet,
    x,
    start: int,
    end: int,
) -> tuple[Tensor, ActivationRecord]:
    """Run layers start..end (inclusive); the stash holds every cache backward needs."""
    if not (0 <= start <= end < len(stack)):
        raise ShapeError(f"layer range [{start},{end}] out of bounds")
    if not weights.covers(start, end):
        raise ShapeError("weights do not cover the requested range")
    arr = as_array(x)
    if arr.ndim != 2 or arr.shape[1] != stack.layers[start].in_dim:
        raise ShapeError(
            f"input shape {arr.shape} incompatible with layer {start} "
            f"(in_dim {stack.layers[start].in_dim})"
        )
    caches = []
    for j in range(start, end + 1):
        layer = stack.layers[j]
        arr, cache = _layer_forward(layer, weights.layer_params(j), arr)
        caches.append(cache)
    record = ActivationRecord(start, end, weights.version, tuple(caches))
    return Tensor(arr), record


def backward_range(
    stack: LayerStack,
    weights: WeightSet,
    record: ActivationRecord,
    upstream,
    batch_id: int = -1,
) -> tuple[GradientSet, Tensor]:
    """Analytic gradients for the range the record came from.

    The record must have been produced with the SAME weight version
    (weight stashing contract).
    """
    if weights.version != record.version:
        raise StashViolation(
            f"stash version {record.version} != weights version {weights.version}"
        )
    if not weights.covers(record.start, record.end):
        raise ShapeError("weights do not cover the stashed range")
    g = as_array(upstream)
    grads: list[ParamPair | None] = [None] * (record.end - record.start + 1)
    for j in range(record.end, record.start - 1, -1):
        layer = stack.layers[j]
        cache = record.caches[j - record.start]
        g, pg = _layer_backward(layer, weights.layer_params(j), cache, g)
        grads[j - record.start] = pg
    return GradientSet(record.start, record.end, batch_id, tuple(grads)), Tensor(g)


def sgd_step(
    weights: WeightSet,
    grads: GradientSet,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> WeightSet:
    """SGD with momentum: v <- momentum*v + (g + wd*w); w <- w - lr*v. Version +1."""
    if (grads.start, grads.end) != (weights.start, weights.end):
        raise ShapeError("gradient range does not match weight range")
    new_params: list[ParamPair | None] = []
    new_vel: list[ParamPair | None] = []
    for pair, vpair, gpair in zip(weights.params, weights.velocity, grads.grads):
        if pair is None:
            if gpair is not None:
                raise ShapeError("gradient present for a parameter-less layer")
            new_params.append(None)
            new_vel.append(None)
            continue
        if gpair is None:
            raise ShapeError("missing gradient for a dense layer")
        w, b = pair
        vw, vb = vpair
        gw, gb = gpair
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ShapeError("gradient shapes not congruent with weights")
        nvw = momentum * vw + (gw + weight_decay * w)
        nvb = momentum * vb + (gb + weight_decay * b)
        new_params.append((_frozen(w - lr * nvw), _frozen(b - lr * nvb)))
        new_vel.append((_frozen(nvw), _frozen(nvb)))
    return WeightSet(weights.start, weights.end, weights.version + 1,
                     tuple(new_params), tuple(new_vel))


def aggregate_weights(versions: list[WeightSet]) -> WeightSet:
    """Elementwise mean of >=2 sets over an identical layer range.

    Momentum buffers are averaged the same way. The result's version is
    max(input versions) + 1.
    """
    if len(versions) < 2:
        raise ShapeError("aggregation needs at least two weight sets")
    head = versions[0]
    for other in versions[1:]:
        if (other.start, other.end) != (head.start, head.end):
            raise ShapeError("cannot aggregate weight sets over different ranges")
    count = float(len(versions))
    new_params: list[ParamPair | None] = []
    new_vel: list[ParamPair | None] = []
    for idx, pair in enumerate(head.params):
        if pair is None:
            new_params.append(None)
            new_vel.append(None)
            continue
        acc_w = np.zeros_like(pair[0])
        acc_b = np.zeros_like(pair[1])
        acc_vw = np.zeros_like(pair[0])
        acc_vb = np.zeros_like(pair[1])
        for ws in versions:
            w, b = ws.params[idx]
            vw, vb = ws.velocity[idx]
            acc_w += w
            acc_b += b
            acc_vw += vw
            acc_vb += vb
        new_params.append((_frozen(acc_w / count), _frozen(acc_b / count)))
        new_vel.append((_frozen(acc_vw / count), _frozen(acc_vb / count)))
    version = max(ws.version for ws in versions) + 1
    return WeightSet(head.start, head.end, version, tuple(new_params), tuple(new_vel))


def cross_entropy(probs, labels) -> float:
    p = as_array(probs)
    y = np.asarray(labels, dtype=np.int64)
    picked = np.maximum(p[np.arange(len(y)), y], np.finfo(np.float64).tiny)
    return float(-np.mean(np.log(picked)))


def loss_upstream(probs, labels) -> np.ndarray:
    """dL/dp for mean cross-entropy: -(1/B) * Y/p, fed into the softmax backward.

    Probabilities are floored at the smallest normal float so a fully
    saturated softmax cannot inject an infinity.
    """
    p = as_array(probs)
    y = np.asarray(labels, dtype=np.int64)
    g = np.zeros_like(p)
    rows = np.arange(len(y))
    picked = np.maximum(p[rows, y], np.finfo(np.float64).tiny)
    g[rows, y] = -1.0 / (len(y) * picked)
    return g


def evaluate(stack: LayerStack, weights: WeightSet, x, labels) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) of the full model on a batch."""
    probs, _ = forward_range(stack, weights, x, 0, len(stack) - 1)
    y = np.asarray(labels, dtype=np.int64)
    loss = cross_entropy(probs, y)
    acc = float(np.mean(probs.data.argmax(axis=1) == y))
    return loss, acc
