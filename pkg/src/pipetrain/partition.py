"""Stage-to-layer assignment: uniform initial split and the capacity/
bandwidth-aware optimal split.

The optimizer is a dynamic program over (last layer j, stage count n): the
best n-stage pipeline over layers 0..j is the best (n-1)-stage pipeline over
0..l, plus the communication of layer l's output (counted twice: activation
forward and gradient backward), plus the last stage's capacity-scaled
compute over l+1..j; the cost of a pipeline is the slowest of its parts.
Split indices are restricted so every stage keeps at least one layer.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from .profiling import BandwidthMatrix, CapacityEstimate, LayerProfile


class InfeasiblePartition(ValueError):
    """More stages than layers (or an invalid stage index)."""


@dataclass(frozen=True)
class PartitionPoints:
    """Strictly increasing stage end-layers; n-1 points describe n stages.

    Stage 0 owns layers 0..points[0]; stage k owns points[k-1]+1..points[k];
    the last stage ends at L-1. An empty tuple is the single-stage split.
    """

    points: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(int(p) for p in self.points))
        for a, b in zip(self.points, self.points[1:]):
            if b <= a:
                raise InfeasiblePartition("partition points must strictly increase")
        if self.points and self.points[0] < 0:
            raise InfeasiblePartition("partition points must be non-negative")

    @property
    def n_stages(self) -> int:
        return len(self.points) + 1


def stage_bounds(points: PartitionPoints | tuple, stage_index: int, total_layers: int) -> tuple[int, int]:
    """Inclusive (start, end) layer bounds of one stage."""
    pts = points.points if isinstance(points, PartitionPoints) else tuple(points)
    n = len(pts) + 1
    if not (0 <= stage_index < n):
        raise InfeasiblePartition(f"stage {stage_index} out of range for {n} stages")
    start = 0 if stage_index == 0 else pts[stage_index - 1] + 1
    end = total_layers - 1 if stage_index == n - 1 else pts[stage_index]
    if start > end:
        raise InfeasiblePartition("empty stage")
    return start, end


def _range_time(times, a: int, b: int) -> float:
    total = 0.0
    for m in range(a, b + 1):
        total += times[m]
    return total


def _check_instance(profile: LayerProfile, capacities: CapacityEstimate,
                    bandwidths: BandwidthMatrix, n: int) -> int:
    depth = len(profile)
    if n < 1:
        raise InfeasiblePartition("need at least one stage")
    if n > depth:
        raise InfeasiblePartition(f"{n} stages cannot split {depth} layers")
    if len(capacities) < n:
        raise InfeasiblePartition("capacities do not cover all stages")
    if n > 1 and len(bandwidths.rates) < n - 1:
        raise InfeasiblePartition("bandwidths do not cover all adjacent pairs")
    return depth


def optimal_partition(
    profile: LayerProfile,
    capacities: CapacityEstimate,
    bandwidths: BandwidthMatrix,
    n: int,
) -> tuple[PartitionPoints, float]:
    """Minimum-bottleneck n-stage split; ties pick the earliest split point."""
    depth = _check_instance(profile, capacities, bandwidths, n)
    t = profile.exec_time
    d = profile.output_size
    c = capacities.factors

    if n == 1:
        return PartitionPoints(()), c[0] * _range_time(t, 0, depth - 1)

    # best[k][j]: minimum bottleneck for layers 0..j on stages 0..k-1
    best = [[None] * depth for _ in range(n + 1)]
    split = [[None] * depth for _ in range(n + 1)]
    for j in range(depth):
        best[1][j] = c[0] * _range_time(t, 0, j)
    for k in range(2, n + 1):
        for j in range(k - 1, depth):
            chosen = None
            chosen_l = None
            for l in range(k - 2, j):
                comm = 2.0 * d[l] / bandwidths.between(k - 2)
                cand = max(best[k - 1][l], comm, c[k - 1] * _range_time(t, l + 1, j))
                if chosen is None or cand < chosen:
                    chosen = cand
                    chosen_l = l
            best[k][j] = chosen
            split[k][j] = chosen_l

    points = []
    j = depth - 1
    for k in range(n, 1, -1):
        l = split[k][j]
        points.append(l)
        j = l
    points.reverse()
    return PartitionPoints(tuple(points)), best[n][depth - 1]


def exhaustive_partition(
    profile: LayerProfile,
    capacities: CapacityEstimate,
    bandwidths: BandwidthMatrix,
    n: int,
) -> tuple[PartitionPoints, float]:
    """Brute-force oracle: evaluate every split directly from the cost model."""
    depth = _check_instance(profile, capacities, bandwidths, n)
    t = profile.exec_time
    d = profile.output_size
    c = capacities.factors

    best_points = None
    best_cost = None
    for pts in itertools.combinations(range(depth - 1), n - 1):
        cost = 0.0
        for stage in range(n):
            start, end = stage_bounds(pts, stage, depth)
            cost = max(cost, c[stage] * _range_time(t, start, end))
        for idx, p in enumerate(pts):
            cost = max(cost, 2.0 * d[p] / bandwidths.between(idx))
        if best_cost is None or cost < best_cost:
            best_cost = cost
            best_points = pts
    return PartitionPoints(best_points or ()), best_cost


def average_partition(
    total_layers: int,
    n: int,
    profile: LayerProfile | None = None,
    bandwidths: BandwidthMatrix | None = None,
) -> PartitionPoints:
    """Initial split before worker capacities are known (all C_i = 1).

    Without a profile this reduces to the equal-time, free-communication
    case; with one, it is the homogeneous special case of the optimizer.
    """
    if profile is None:
        profile = LayerProfile(tuple([1.0] * total_layers), tuple([1] * total_layers))
    if bandwidths is None:
        bandwidths = BandwidthMatrix.infinite(max(n - 1, 0))
    points, _ = optimal_partition(profile, CapacityEstimate.uniform(n), bandwidths, n)
    return points
