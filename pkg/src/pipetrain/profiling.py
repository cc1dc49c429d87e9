"""Per-layer execution-time / output-size profiling and capacity estimation.

The central node profiles the full model, and worker capacities are the
ratio of a worker's reported mean stage time to the central node's time for
the same layers. The central node's own capacity is pinned at 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import wire
from .model import LayerStack, WeightSet, backward_range, forward_range, loss_upstream


@dataclass(frozen=True)
class LayerProfile:
    """Forward+backward seconds and serialized output bytes, per layer."""

    exec_time: tuple[float, ...]
    output_size: tuple[int, ...]

    def __post_init__(self):
        if len(self.exec_time) != len(self.output_size):
            raise ValueError("profile arrays must align")
        if any(t <= 0 for t in self.exec_time) or any(s <= 0 for s in self.output_size):
            raise ValueError("profiled times and sizes must be positive")

    def __len__(self) -> int:
        return len(self.exec_time)

    def range_time(self, start: int, end: int) -> float:
        total = 0.0
        for j in range(start, end + 1):
            total += self.exec_time[j]
        return total

    def to_dict(self) -> dict:
        return {"exec_time": list(self.exec_time), "output_size": list(self.output_size)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerProfile":
        return cls(tuple(float(t) for t in d["exec_time"]),
                   tuple(int(s) for s in d["output_size"]))


@dataclass(frozen=True)
class CapacityEstimate:
    """Per-stage slowdown factors C_i; C_0 is always 1.0 (larger = slower)."""

    factors: tuple[float, ...]

    def __post_init__(self):
        if not self.factors or self.factors[0] != 1.0:
            raise ValueError("central node capacity must be pinned at 1.0")
        if any(c <= 0 for c in self.factors):
            raise ValueError("capacities must be positive")

    def __len__(self) -> int:
        return len(self.factors)

    @classmethod
    def uniform(cls, n: int) -> "CapacityEstimate":
        return cls(tuple([1.0] * n))


@dataclass(frozen=True)
class BandwidthMatrix:
    """Bytes/second for each adjacent pair (i, i+1) in the worker list."""

    rates: tuple[float, ...]

    def __post_init__(self):
        if any(r <= 0 for r in self.rates):
            raise ValueError("bandwidths must be positive")

    def between(self, i: int) -> float:
        return self.rates[i]

    @classmethod
    def infinite(cls, n_links: int) -> "BandwidthMatrix":
        return cls(tuple([float("inf")] * n_links))


class _NullCost:
    def forward_cost(self, node_index, layer_index):
        return 0.0

    def backward_cost(self, node_index, layer_index):
        return 0.0


def profile_model(
    stack: LayerStack,
    weights: WeightSet,
    sample_x,
    sample_labels,
    clock,
    cost_model=None,
    repetitions: int = 10,
) -> LayerProfile:
    """Time forward+backward of every layer on the central node.

    Uses the active clock, so the simulated and live modes share this code
    path: in simulation the cost model charges the virtual clock, live mode
    measures wall time. Runs ``repetitions`` times and averages.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    cost = cost_model or _NullCost()
    depth = len(stack)
    fwd = np.zeros(depth)
    bwd = np.zeros(depth)
    sizes: list[int] = [0] * depth
    for _ in range(repetitions):
        x = sample_x
        records = []
        for j in range(depth):
            t0 = clock.now()
            out, rec = forward_range(stack, weights, x, j, j)
            clock.charge(cost.forward_cost(0, j))
            fwd[j] += clock.now() - t0
            records.append(rec)
            x = out.data
        g = loss_upstream(x, sample_labels)
        for j in range(depth - 1, -1, -1):
            t0 = clock.now()
            _, down = backward_range(stack, weights, records[j], g)
            clock.charge(cost.backward_cost(0, j))
            bwd[j] += clock.now() - t0
            g = down.data
    # sizes reflect the actual serialized activation for the sample batch
    x = sample_x
    for j in range(depth):
        out, _ = forward_range(stack, weights, x, j, j)
        sizes[j] = len(wire.encode_tensor(out.data))
        x = out.data
    exec_time = tuple((fwd[j] + bwd[j]) / repetitions for j in range(depth))
    return LayerProfile(exec_time, tuple(sizes))


def estimate_capacity(
    reported: Mapping[int, float],
    profile: LayerProfile,
    points,
    n_stages: int,
) -> CapacityEstimate:
    """C_i = reported mean stage time / central-node time for stage i's layers.

    Stages without a report default to 1.0 (the recovery-path assumption).
    C_0 is 1.0 unconditionally.
    """
    from .partition import stage_bounds  # local import to avoid a cycle

    factors = [1.0]
    for i in range(1, n_stages):
        if i in reported:
            start, end = stage_bounds(points, i, len(profile))
            factors.append(float(reported[i]) / profile.range_time(start, end))
        else:
            factors.append(1.0)
    return CapacityEstimate(tuple(factors))


def scaled_layer_time(profile: LayerProfile, capacity: CapacityEstimate, i: int, j: int) -> float:
    """Estimated execution time of layer j on stage i: central time scaled by C_i."""
    return profile.exec_time[j] * capacity.factors[i]
