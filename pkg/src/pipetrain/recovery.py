"""Failure classification, worker-list updates, and weight redistribution.

The central node's per-batch timer fires when a batch's gradients never
come back; a probe round then sorts the roster into healthy, restarted
(alive but with empty memory) and unreachable nodes. Three responses:

* everyone healthy: replay from the batch whose gradients were lost;
* a worker restarted: resend it the state variables, it refetches its own
  chain backup from its successor, replay;
* workers unreachable: compact the worker list, re-partition over the
  survivors, redistribute weights under a commit barrier, reset state.

Redistribution planning is worker-local: each node compares the new
partition against the current one, keeps what it already holds, and maps
every missing layer to the index that now owns it (with the failed-index
correction when recovering from a single failure; the chain backup of a
failed last stage lives on the central node).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .partition import PartitionPoints, stage_bounds

PROBE_OK = "ok"
PROBE_RESTARTED = "restarted"
PROBE_UNREACHABLE = "unreachable"


class RecoveryCase(Enum):
    ALL_OK = 1
    RESTARTED = 2
    UNREACHABLE = 3


@dataclass(frozen=True)
class WorkerEntry:
    worker_id: int
    address: str


@dataclass(frozen=True)
class WorkerList:
    """Ordered device roster; position == pipeline stage, index 0 is central."""

    entries: tuple[WorkerEntry, ...]

    def __post_init__(self):
        ids = [e.worker_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("worker ids must be unique")
        if not self.entries:
            raise ValueError("worker list cannot be empty")

    def __len__(self) -> int:
        return len(self.entries)

    def node_at(self, stage: int) -> int:
        return self.entries[stage].worker_id

    def stage_of(self, worker_id: int) -> int | None:
        for idx, e in enumerate(self.entries):
            if e.worker_id == worker_id:
                return idx
        return None

    def to_list(self) -> list[dict]:
        return [{"worker_id": e.worker_id, "address": e.address} for e in self.entries]

    @classmethod
    def from_list(cls, raw: list[dict]) -> "WorkerList":
        return cls(tuple(WorkerEntry(int(d["worker_id"]), str(d["address"])) for d in raw))


@dataclass(frozen=True)
class FaultReport:
    """Outcome of one probe round after a batch timer expired."""

    trigger_batch_id: int
    probe_results: dict[int, str]  # stage index -> PROBE_*

    def classify(self) -> RecoveryCase:
        states = self.probe_results.values()
        if any(s == PROBE_UNREACHABLE for s in states):
            return RecoveryCase.UNREACHABLE
        if any(s == PROBE_RESTARTED for s in states):
            return RecoveryCase.RESTARTED
        return RecoveryCase.ALL_OK

    def failed_stages(self) -> list[int]:
        return sorted(i for i, s in self.probe_results.items() if s == PROBE_UNREACHABLE)

    def restarted_stages(self) -> list[int]:
        return sorted(i for i, s in self.probe_results.items() if s == PROBE_RESTARTED)


def update_worker_list(workers: WorkerList, failed: list[int]) -> WorkerList:
    """Drop failed stages from the roster.

    A single failure decrements every index greater than the failed one;
    multiple failures substitute each failed slot with the subsequent alive
    workers in order. Both reduce to an order-preserving compaction of the
    surviving entries. Index 0 (the central node) cannot fail.
    """
    if not failed:
        return workers
    failed_set = set(failed)
    if 0 in failed_set:
        raise ValueError("the central node cannot be removed from the roster")
    survivors = tuple(e for i, e in enumerate(workers.entries) if i not in failed_set)
    return WorkerList(survivors)


@dataclass(frozen=True)
class RedistributionPlan:
    """Fetch plan for one worker: already-local layers and per-target needs."""

    needed: dict[int, list[int]]  # target index in the NEW roster -> layers
    local: list[int]

    def all_layers(self) -> list[int]:
        out = list(self.local)
        for layers in self.needed.values():
            out.extend(layers)
        return sorted(out)


def plan_redistribution(
    new_points: PartitionPoints,
    cur_points: PartitionPoints,
    failed_index: int | None,
    cur_index: int | None,
    new_index: int,
    total_layers: int,
    n_old: int | None = None,
) -> RedistributionPlan:
    """Per-worker weight redistribution (the single-failure / dynamic form).

    ``failed_index`` of None is the dynamic re-partition case: no index
    correction is applied because nobody left the roster. With a failure,
    a target index greater than the failed one is decremented (the roster
    shifted), a target equal to the failed one is left unchanged (the node
    that moved into that slot is the old successor holding the chain
    backup), and a failed last stage resolves to the central node, which
    holds its chain backup. ``cur_index`` of None marks a worker with no
    local weights (a fresh restart), so nothing can be served locally.
    """
    if n_old is None:
        n_old = cur_points.n_stages
    start_new, end_new = stage_bounds(new_points, new_index, total_layers)
    if cur_index is not None:
        start_cur, end_cur = stage_bounds(cur_points, cur_index, total_layers)
    else:
        start_cur, end_cur = 1, 0  # empty range

    local: list[int] = []
    missing: list[int] = []
    for layer in range(start_new, end_new + 1):
        if start_cur <= layer <= end_cur:
            local.append(layer)
        else:
            missing.append(layer)

    needed: dict[int, list[int]] = {}
    for layer in missing:
        target = _owner_stage(cur_points, layer, total_layers)
        if failed_index is not None:
            if target > failed_index:
                target -= 1
            elif target == failed_index:
                if failed_index == n_old - 1:
                    target = 0
                # otherwise unchanged: the new occupant of the failed slot is
                # the old successor and serves the chain backup
        needed.setdefault(target, []).append(layer)
    return RedistributionPlan(needed, local)


def plan_redistribution_multi(
    new_points: PartitionPoints,
    cur_points: PartitionPoints,
    failed_indices: list[int],
    old_to_new: dict[int, int],
    cur_index: int | None,
    new_index: int,
    total_layers: int,
) -> RedistributionPlan:
    """Multi-failure fetch plan.

    Layers of a surviving old stage point at that worker's new index; layers
    of a failed stage point at the failed stage's old successor if that node
    survived (it holds the chain backup), else at the central node's global
    map. The caller still falls back to the central node if a target cannot
    actually serve a layer.
    """
    failed = set(failed_indices)
    n_old = cur_points.n_stages
    start_new, end_new = stage_bounds(new_points, new_index, total_layers)
    if cur_index is not None:
        start_cur, end_cur = stage_bounds(cur_points, cur_index, total_layers)
    else:
        start_cur, end_cur = 1, 0

    local: list[int] = []
    needed: dict[int, list[int]] = {}
    for layer in range(start_new, end_new + 1):
        if start_cur <= layer <= end_cur:
            local.append(layer)
            continue
        owner = _owner_stage(cur_points, layer, total_layers)
        if owner not in failed:
            target = old_to_new[owner]
        else:
            succ = owner + 1
            if owner == n_old - 1:
                target = 0  # chain backup of the last stage is on the central node
            elif succ in failed:
                target = 0  # backup holder died too: central global map
            else:
                target = old_to_new[succ]
        needed.setdefault(target, []).append(layer)
    return RedistributionPlan(needed, local)


def _owner_stage(points: PartitionPoints, layer: int, total_layers: int) -> int:
    for stage in range(points.n_stages):
        start, end = stage_bounds(points, stage, total_layers)
        if start <= layer <= end:
            return stage
    raise ValueError(f"layer {layer} not covered by partition {points.points}")


def old_to_new_indices(old: WorkerList, new: WorkerList) -> dict[int, int]:
    """Map surviving workers' old stage indices to their new positions."""
    mapping: dict[int, int] = {}
    for new_idx, entry in enumerate(new.entries):
        old_idx = old.stage_of(entry.worker_id)
        if old_idx is not None:
            mapping[old_idx] = new_idx
    return mapping


def absorb_partition(cur_points: PartitionPoints, failed_index: int,
                     total_layers: int) -> PartitionPoints:
    """Successor-absorbs-all recovery: merge the failed stage into its neighbor.

    Used as the comparison strategy; the failed stage's layers land whole on
    its successor (predecessor for a failed last stage) with no rebalancing.
    """
    n = cur_points.n_stages
    if not (0 < failed_index < n):
        raise ValueError("failed index out of range")
    pts = list(cur_points.points)
    if failed_index == n - 1:
        # predecessor absorbs: drop the last boundary
        del pts[failed_index - 1]
    else:
        # successor absorbs: drop the boundary between failed and successor
        del pts[failed_index]
    return PartitionPoints(tuple(pts))
