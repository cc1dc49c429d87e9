"""Wires model, partitioning, pipeline stages, replication and recovery
into complete training runs over either transport.

Node roles: node 0 (the central node) owns the dataset, profiles the model,
selects the partition, arms per-batch timers and coordinates re-partition
and recovery; worker nodes each run one stage. Node ids are stable across
roster changes -- the worker list maps the current stage order onto nodes.

The same node/worker objects run under two drivers: a discrete-event driver
that charges per-action costs to a virtual clock (deterministic given
config+seed) and a thread driver against wall time and sockets.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import wire
from .config import ExperimentConfig, FaultEvent
from .data import Dataset, gaussian_clusters
from .engine import WAIT, BatchMeta, StageWorker, TrainingState
from .metrics import MetricsSink, steady_state_period
from .model import (
    LayerStack,
    WeightSet,
    build_stack,
    initial_weights,
    merge_weights,
    slice_weights,
)
from .partition import PartitionPoints, average_partition, optimal_partition, stage_bounds
from .profiling import BandwidthMatrix, CapacityEstimate, LayerProfile, estimate_capacity, profile_model
from .recovery import (
    PROBE_OK,
    PROBE_RESTARTED,
    PROBE_UNREACHABLE,
    FaultReport,
    RecoveryCase,
    WorkerEntry,
    WorkerList,
    absorb_partition,
    old_to_new_indices,
    plan_redistribution,
    plan_redistribution_multi,
    update_worker_list,
)
from .transport import LiveNetwork, Message, SimClock, SimLink, SimNetwork, WallClock, free_ports

log = logging.getLogger(__name__)


class CostModel:
    """Per-node virtual compute cost: base per-layer seconds times a slowdown."""

    def __init__(self, forward: tuple[float, ...], backward: tuple[float, ...],
                 speed: tuple[float, ...]):
        self.forward = forward
        self.backward = backward
        self.speed = speed

    def forward_cost(self, node_id: int, layer: int) -> float:
        return self.forward[layer] * self.speed[node_id]

    def backward_cost(self, node_id: int, layer: int) -> float:
        return self.backward[layer] * self.speed[node_id]

    def action_cost(self, node_id: int, kind: str, start: int, end: int) -> float:
        table = self.forward if kind == "F" else self.backward
        total = 0.0
        for j in range(start, end + 1):
            total += table[j]
        return total * self.speed[node_id]


class ReplicaStore:
    """Backup snapshots keyed by origin stage; a later interval replaces."""

    def __init__(self):
        self._items: dict[int, tuple[dict, WeightSet]] = {}

    def store(self, header: dict, ws: WeightSet):
        self._items[int(header["origin_stage"])] = (dict(header), ws)

    def fetch_backup(self, origin_stage: int):
        return self._items.get(origin_stage)

    def serve_layer(self, layer: int):
        for header, ws in self._items.values():
            if ws.start <= layer <= ws.end:
                return ws.layer_params(layer), ws.layer_velocity(layer), header
        return None

    def origins(self) -> list[int]:
        return sorted(self._items)

    def clear(self):
        self._items.clear()


@dataclass
class RecoveryAudit:
    trigger: int
    case: str
    failed_stages: list[int]
    old_points: tuple[int, ...]
    new_points: tuple[int, ...]
    old_workers: list[int]
    new_workers: list[int]
    pre_live: dict[int, bytes] = field(default_factory=dict)  # layer -> bytes
    chain_available: dict[tuple[int, int], bytes] = field(default_factory=dict)  # (node, layer)
    global_available: dict[int, bytes] = field(default_factory=dict)
    post: dict[int, tuple[int, bytes]] = field(default_factory=dict)  # layer -> (node, bytes)
    provenance: dict[int, str] = field(default_factory=dict)


@dataclass
class RunResult:
    config: ExperimentConfig
    run_id: str
    records: list[dict]
    final_weights: WeightSet
    dataset: Dataset
    stack: LayerStack
    profile: LayerProfile
    recoveries: list[RecoveryAudit]
    aggregations: list[dict]
    completed_batches: int

    def metrics_blob(self) -> bytes:
        return b"\n".join(wire.canonical_json(r) for r in self.records) + b"\n"


def _layer_bytes(ws: WeightSet, layer: int) -> bytes:
    return wire.encode_layer_params(ws.layer_params(layer), ws.layer_velocity(layer))


# ---------------------------------------------------------------------------
# nodes


class _Node:
    """Shared node behavior: message dispatch, replica store, fetch serving."""

    def __init__(self, runner: "Runner", node_id: int):
        self.runner = runner
        self.node_id = node_id
        self.worker: StageWorker | None = None
        self.worker_list: WorkerList = runner.worker_list
        self.replica = ReplicaStore()
        self.restarted = False
        self.pending: dict | None = None  # rebuild in progress (plan + collected layers)

    # --- env protocol used by StageWorker ---------------------------------

    def send(self, msg: Message):
        self.runner.network.send(msg)

    def emit(self, record: dict):
        self.runner.emit(record)

    def route(self, stage: int) -> int:
        return self.worker_list.node_at(stage)

    def aggregate_hook(self, stage: int, snaps: list[WeightSet], agg: WeightSet):
        self.runner.note_aggregation(stage, snaps, agg)

    def store_global(self, ws: WeightSet, count: int):
        raise NotImplementedError  # only the central node stores globals

    # stage-0 dataset hooks; only meaningful on the central node
    def peek_batch(self):
        raise NotImplementedError

    def claim_batch(self):
        raise NotImplementedError

    def fetch_batch(self, batch_id):
        raise NotImplementedError

    def forward_committed(self, batch_id: int):
        raise NotImplementedError

    def backward_committed(self, batch_id: int, reports: dict):
        raise NotImplementedError

    # --- message handling ---------------------------------------------------

    def handle_message(self, msg: Message):
        kind = msg.kind
        if kind == wire.KIND_ACTIVATION:
            if self.worker is None:
                return
            meta_raw, x, labels = wire.parse_activation_body(msg.payload)
            self.worker.enqueue_activation(BatchMeta.from_dict(meta_raw), x, labels)
        elif kind == wire.KIND_GRADIENT:
            if self.worker is None:
                return
            header, grad = wire.parse_gradient_body(msg.payload)
            self.worker.enqueue_gradient(BatchMeta.from_dict(header["meta"]), grad,
                                         header.get("reports", {}))
        elif kind == wire.KIND_WEIGHT_SNAPSHOT:
            header, ws = wire.parse_snapshot_body(msg.payload)
            self.on_snapshot(header, ws)
        elif kind == wire.KIND_PROBE:
            self.on_probe(msg)
        elif kind == wire.KIND_PROBE_ACK:
            self.on_probe_ack(wire.parse_control_body(msg.payload))
        elif kind == wire.KIND_STATE_SYNC:
            self.on_state_sync(wire.parse_control_body(msg.payload))
        elif kind == wire.KIND_REPARTITION:
            self.on_repartition(wire.parse_control_body(msg.payload))
        elif kind == wire.KIND_WEIGHT_FETCH:
            self.on_weight_fetch(msg)
        elif kind == wire.KIND_WEIGHT_FETCH_ACK:
            self.on_fetch_ack(*wire.parse_fetch_ack_body(msg.payload))
        elif kind == wire.KIND_FETCH_DONE:
            self.on_fetch_done(wire.parse_control_body(msg.payload))
        elif kind == wire.KIND_COMMIT:
            self.on_commit(wire.parse_control_body(msg.payload))

    def on_snapshot(self, header: dict, ws: WeightSet):
        self.replica.store(header, ws)

    def on_probe(self, msg: Message):
        # a probe also pauses the executor: training is stalled while the
        # handler runs, and resumes on commit
        if self.worker is not None:
            self.worker.paused = True
        state = PROBE_RESTARTED if self.restarted else PROBE_OK
        body = wire.control_body({"node": self.node_id, "state": state})
        self.send(Message(wire.KIND_PROBE_ACK, self.node_id, msg.sender, -1, body))

    def on_probe_ack(self, body: dict):
        pass  # only the central node collects acks

    def on_fetch_done(self, body: dict):
        pass  # only the central node collects completions

    # --- weight fetch serving ------------------------------------------------

    def serve_layer(self, layer: int):
        """(params, velocity, source) for a layer, from live weights or backups."""
        if self.worker is not None and self.worker.start <= layer <= self.worker.end:
            cur = self.worker.current
            return cur.layer_params(layer), cur.layer_velocity(layer), "live"
        hit = self.replica.serve_layer(layer)
        if hit is not None:
            pair, vel, header = hit
            return pair, vel, header.get("kind", "chain")
        return None

    def on_weight_fetch(self, msg: Message):
        body = wire.parse_control_body(msg.payload)
        layers = body["layers"]
        served = []
        sources = {}
        missing = []
        for layer in layers:
            hit = self.serve_layer(layer)
            if hit is None:
                missing.append(layer)
                continue
            pair, vel, source = hit
            served.append((layer, pair, vel))
            sources[str(layer)] = source
        header = {"req": body.get("req"), "missing": missing, "sources": sources,
                  "server": self.node_id}
        ack = wire.fetch_ack_body(header, served)
        self.send(Message(wire.KIND_WEIGHT_FETCH_ACK, self.node_id, msg.sender, -1, ack))

    # --- redistribution (worker side) ---------------------------------------

    def on_state_sync(self, body: dict):
        """Case-2 path: a restarted worker receives the state variables and
        refetches its own pre-failure weights from its neighbor."""
        points = PartitionPoints(tuple(body["points"]))
        stage = int(body["stage"])
        total_layers = body["total_layers"]
        start, end = stage_bounds(points, stage, total_layers)
        self.worker_list = WorkerList.from_list(body["worker_list"])
        self.pending = {
            "stage": stage,
            "n_stages": points.n_stages,
            "points": points,
            "layers": list(range(start, end + 1)),
            "collected": {},
            "provenance": {},
            "create": True,
        }
        neighbor_stage = stage + 1
        target_node = 0 if neighbor_stage >= points.n_stages else self.worker_list.node_at(neighbor_stage)
        self._fetch_from(target_node, self.pending["layers"])

    def _fetch_from(self, target_node: int, layers: list[int]):
        if target_node == self.node_id:
            # serve locally; anything missing falls back to the central node
            missing = []
            for layer in layers:
                hit = self.serve_layer(layer)
                if hit is None:
                    missing.append(layer)
                else:
                    pair, vel, source = hit
                    self.pending["collected"][layer] = (pair, vel)
                    self.pending["provenance"][layer] = source
            if missing:
                if self.node_id == 0:
                    raise RuntimeError(
                        f"unrecoverable: no live copy, chain backup or global "
                        f"backup for layers {missing}")
                self._fetch_from(0, missing)
            else:
                self._maybe_fetch_complete()
            return
        body = wire.control_body({"layers": layers, "req": self.node_id})
        self.send(Message(wire.KIND_WEIGHT_FETCH, self.node_id, target_node, -1, body))

    def on_fetch_ack(self, header: dict, layers: list):
        if self.pending is None:
            return
        for layer, pair, vel in layers:
            self.pending["collected"][layer] = (pair, vel)
            self.pending["provenance"][layer] = header["sources"].get(str(layer), "unknown")
        missing = [l for l in header.get("missing", []) if l in self.pending["layers"]
                   and l not in self.pending["collected"]]
        if missing:
            if header.get("server") == 0:
                raise RuntimeError(
                    f"unrecoverable: the central node has no backup for layers {missing}")
            self._fetch_from(0, missing)
            return
        self._maybe_fetch_complete()

    def _maybe_fetch_complete(self):
        if self.pending is None:
            return
        outstanding = [l for l in self.pending["layers"] if l not in self.pending["collected"]]
        if outstanding:
            return
        body = wire.control_body({"node": self.node_id,
                                  "provenance": {str(k): v for k, v in
                                                 self.pending["provenance"].items()}})
        self.send(Message(wire.KIND_FETCH_DONE, self.node_id, 0, -1, body))

    def on_repartition(self, body: dict):
        new_points = PartitionPoints(tuple(body["new_points"]))
        cur_points = PartitionPoints(tuple(body["cur_points"]))
        new_list = WorkerList.from_list(body["worker_list"])
        failed = list(body.get("failed", []))
        total_layers = body["total_layers"]
        new_index = new_list.stage_of(self.node_id)
        if new_index is None:
            return  # not part of the new roster
        cur_index = None
        if self.worker is not None and not self.restarted:
            cur_index = self.worker.stage
        if len(failed) <= 1:
            failed_index = failed[0] if failed else None
            plan = plan_redistribution(new_points, cur_points, failed_index, cur_index,
                                       new_index, total_layers, n_old=body["n_old"])
        else:
            mapping = old_to_new_indices(self.worker_list, new_list)
            plan = plan_redistribution_multi(new_points, cur_points, failed, mapping,
                                             cur_index, new_index, total_layers)
        start, end = stage_bounds(new_points, new_index, total_layers)
        self.pending = {
            "stage": new_index,
            "n_stages": new_points.n_stages,
            "points": new_points,
            "layers": list(range(start, end + 1)),
            "collected": {},
            "provenance": {},
            "create": self.worker is None,
        }
        self.worker_list = new_list
        cur = self.worker.current if self.worker is not None else None
        for layer in plan.local:
            self.pending["collected"][layer] = (cur.layer_params(layer),
                                                cur.layer_velocity(layer))
            self.pending["provenance"][layer] = "local"
        for target, layers in sorted(plan.needed.items()):
            self._fetch_from(new_list.node_at(target), layers)
        self._maybe_fetch_complete()

    def on_commit(self, body: dict):
        generation = int(body["generation"])
        new_list = WorkerList.from_list(body["worker_list"])
        self.worker_list = new_list
        if self.pending is not None:
            stage = self.pending["stage"]
            n_stages = self.pending["n_stages"]
            layers = self.pending["layers"]
            params = tuple(self.pending["collected"][l][0] for l in layers)
            vel = tuple(self.pending["collected"][l][1] for l in layers)
            ws = WeightSet(layers[0], layers[-1], 0, params, vel)
            if self.worker is None:
                self.worker = self.runner.make_worker(self, stage, n_stages, ws, generation)
            else:
                self.worker.rebuild(stage, n_stages, ws, generation)
            self.restarted = False
            self.pending = None
        elif self.worker is not None:
            self.worker.apply_reset(generation)
        if self.worker is not None:
            self.worker.paused = False
        self.runner.note_commit_applied(self)


class WorkerNode(_Node):
    pass


class CentralNode(_Node):
    """Node 0: dataset, training state, timers, partitioning, recovery."""

    def __init__(self, runner: "Runner"):
        super().__init__(runner, 0)
        cfg = runner.config
        self.dataset = runner.dataset
        self.state = TrainingState(learning_rate=cfg.learning_rate,
                                   batch_number=runner.total_batches)
        self.cursor = 0
        self.phase = "train"  # train | draining | probing | redistributing | done
        self.reports: dict[int, float] = {}
        self.global_map = ReplicaStore()
        self.initial_full = runner.full_weights
        self.probe_acks: dict[int, str] = {}
        self.probe_attempt = 0
        self.fetch_done: set[int] = set()
        self.fetch_provenance: dict[int, dict] = {}
        self.expected_done: set[int] = set()
        self.pending_commit: dict | None = None
        self.trigger_batch: int | None = None
        self.generation = 0
        self.deadlines: dict[int, float] = {}  # batch -> absolute deadline (live mode)
        self._checkpoint_seen: dict[int, set[int]] = {}

    # --- dataset / training state hooks ------------------------------------

    def peek_batch(self):
        if self.phase != "train":
            return None
        if self.cursor >= self.runner.total_batches:
            return None
        return self.cursor

    def claim_batch(self):
        b = self.cursor
        self.cursor += 1
        return b

    def fetch_batch(self, batch_id: int):
        return self.dataset.batch(batch_id)

    def forward_committed(self, batch_id: int):
        self.state.committed_forward_id = batch_id
        self.state.epoch_number = self.dataset.epoch_of(batch_id)
        self.runner.arm_timer(batch_id)

    def backward_committed(self, batch_id: int, reports: dict):
        self.state.committed_backward_id = batch_id
        for stage, value in reports.items():
            self.reports[int(stage)] = float(value)
        self.runner.clear_timer(batch_id)
        count = batch_id + 1
        if count >= self.runner.total_batches:
            self.phase = "done"
            self.runner.on_done()
            return
        pipe = self.runner.config.pipeline
        if (self.phase == "train" and pipe.dynamic_partition
                and len(self.worker_list) > 1
                and (count == pipe.repartition_warmup
                     or (count > pipe.repartition_warmup
                         and (count - pipe.repartition_warmup) % pipe.repartition_interval == 0))):
            new_points = self.compute_repartition()
            if new_points is not None:
                # only a changed partition is worth draining the pipeline for
                self._pending_points = new_points
                self.phase = "draining"
        if self.phase == "draining" and self.state.committed_forward_id == batch_id:
            self.phase = "redistributing"
            self.start_redistribution(self._pending_points, self.worker_list, [],
                                      reset_to=None, case="dynamic")

    def store_global(self, ws: WeightSet, count: int):
        header = {"origin_stage": 0, "batch_id": count, "version": ws.version,
                  "kind": "global"}
        self.global_map.store(header, ws)
        self._note_checkpoint(0, count)

    def serve_layer(self, layer: int):
        hit = super().serve_layer(layer)
        if hit is not None:
            return hit
        hit = self.global_map.serve_layer(layer)
        if hit is not None:
            pair, vel, header = hit
            return pair, vel, "global"
        if self.initial_full.covers(layer, layer):
            # nothing was ever replicated for this layer (a fault before the
            # first interval); fall back to the seeded initial values
            log.warning("serving layer %d from the initial weights", layer)
            return (self.initial_full.layer_params(layer),
                    self.initial_full.layer_velocity(layer), "init")
        return None

    def on_snapshot(self, header: dict, ws: WeightSet):
        if header.get("kind") == "global":
            self.global_map.store(header, ws)
            self._note_checkpoint(int(header["origin_stage"]), int(header["batch_id"]))
        else:
            self.replica.store(header, ws)

    def _note_checkpoint(self, stage: int, count: int):
        if not self.runner.config.disk_checkpoint:
            return
        seen = self._checkpoint_seen.setdefault(count, set())
        seen.add(stage)
        if len(seen) == len(self.worker_list):
            self.runner.write_checkpoint(count, self.global_map)

    # --- fault handling -------------------------------------------------------

    def on_timer(self, batch_id: int):
        if self.state.status != 0 or self.phase == "done":
            return
        if self.state.committed_backward_id >= batch_id:
            return
        # gradients for this batch never came back
        self.state.status = 1
        self.trigger_batch = self.state.committed_backward_id + 1
        self.runner.emit({"event": "FAULT", "trigger": self.trigger_batch,
                          "batch": batch_id, "stage": 0})
        self.phase = "probing"
        if self.worker is not None:
            self.worker.paused = True
        self.probe_attempt = 0
        self.probe_acks = {}
        self.start_probe_round()

    def start_probe_round(self):
        self.probe_attempt += 1
        for stage in range(1, len(self.worker_list)):
            node = self.worker_list.node_at(stage)
            if node in self.probe_acks:
                continue
            body = wire.control_body({"from": 0})
            self.send(Message(wire.KIND_PROBE, 0, node, -1, body))
        self.runner.schedule(self.runner.config.probe_timeout, self.probe_deadline)

    def probe_deadline(self):
        if self.phase != "probing":
            return
        missing = [self.worker_list.node_at(s) for s in range(1, len(self.worker_list))
                   if self.worker_list.node_at(s) not in self.probe_acks]
        if missing and self.probe_attempt < 2:
            self.start_probe_round()
            return
        results: dict[int, str] = {}
        for stage in range(1, len(self.worker_list)):
            node = self.worker_list.node_at(stage)
            results[stage] = self.probe_acks.get(node, PROBE_UNREACHABLE)
        report = FaultReport(self.trigger_batch, results)
        self.classify_and_recover(report)

    def on_probe_ack(self, body: dict):
        self.probe_acks[int(body["node"])] = body["state"]

    def classify_and_recover(self, report: FaultReport):
        case = report.classify()
        self.phase = "redistributing"
        if case is RecoveryCase.ALL_OK:
            self.runner.begin_audit(report, "all_ok", [], self.runner.points,
                                    self.worker_list, self.worker_list)
            self.broadcast_commit(self.runner.points, self.worker_list,
                                  reset_to=report.trigger_batch_id, case="all_ok")
            return
        if case is RecoveryCase.RESTARTED:
            restarted = report.restarted_stages()
            self.runner.begin_audit(report, "restarted", restarted, self.runner.points,
                                    self.worker_list, self.worker_list)
            self.expected_done = set()
            self.fetch_done.clear()
            self.fetch_provenance.clear()
            self.pending_commit = {
                "points": self.runner.points,
                "worker_list": self.worker_list,
                "reset_to": report.trigger_batch_id,
                "case": "restarted",
            }
            table = self.state.to_table()
            for stage in restarted:
                node = self.worker_list.node_at(stage)
                self.expected_done.add(node)
                body = wire.control_body({
                    "table": table,
                    "points": list(self.runner.points.points),
                    "worker_list": self.worker_list.to_list(),
                    "stage": stage,
                    "total_layers": len(self.runner.stack),
                })
                self.send(Message(wire.KIND_STATE_SYNC, 0, node, -1, body))
            return
        # unreachable workers: compact roster, re-partition, redistribute
        failed = report.failed_stages()
        old_list = self.worker_list
        new_list = update_worker_list(old_list, failed)
        new_points = self.runner.recovery_partition(failed, new_list)
        self.runner.begin_audit(report, "unreachable", failed, new_points,
                                old_list, new_list)
        self.start_redistribution(new_points, new_list, failed,
                                  reset_to=report.trigger_batch_id, case="unreachable")

    # --- repartition / redistribution (central side) -----------------------

    def compute_repartition(self) -> PartitionPoints | None:
        """New optimal points from the latest capacity reports, or None if the
        current partition is already optimal."""
        capacities = estimate_capacity(self.reports, self.runner.profile,
                                       self.runner.points, len(self.worker_list))
        new_points, bottleneck = optimal_partition(self.runner.profile, capacities,
                                                   self.runner.bandwidths,
                                                   len(self.worker_list))
        if new_points.points == self.runner.points.points:
            return None
        log.info("repartition at batch %s: %s -> %s (bottleneck %.6f)",
                 self.state.committed_backward_id, self.runner.points.points,
                 new_points.points, bottleneck)
        return new_points

    def start_redistribution(self, new_points: PartitionPoints, new_list: WorkerList,
                             failed: list[int], reset_to: int | None, case: str):
        self.phase = "redistributing"
        self.expected_done = set()
        self.fetch_done.clear()
        self.fetch_provenance.clear()
        self.pending_commit = {
            "points": new_points,
            "worker_list": new_list,
            "reset_to": reset_to,
            "case": case,
        }
        body = {
            "new_points": list(new_points.points),
            "cur_points": list(self.runner.points.points),
            "worker_list": new_list.to_list(),
            "failed": failed,
            "n_old": len(self.worker_list),
            "total_layers": len(self.runner.stack),
        }
        for entry in new_list.entries:
            self.expected_done.add(entry.worker_id)
            if entry.worker_id == 0:
                self.on_repartition(dict(body))
            else:
                self.send(Message(wire.KIND_REPARTITION, 0, entry.worker_id, -1,
                                  wire.control_body(body)))

    def on_fetch_done(self, body: dict):
        node = int(body["node"])
        self.fetch_done.add(node)
        self.fetch_provenance[node] = {int(k): v for k, v in
                                       body.get("provenance", {}).items()}
        if self.pending_commit is not None and self.fetch_done >= self.expected_done:
            commit = self.pending_commit
            self.pending_commit = None
            self.broadcast_commit(commit["points"], commit["worker_list"],
                                  reset_to=commit["reset_to"], case=commit["case"])

    def broadcast_commit(self, points: PartitionPoints, new_list: WorkerList,
                         reset_to: int | None, case: str):
        self.generation += 1
        body = {
            "points": list(points.points),
            "worker_list": new_list.to_list(),
            "generation": self.generation,
            "reset_to": reset_to,
        }
        for entry in new_list.entries:
            if entry.worker_id == 0:
                continue
            self.send(Message(wire.KIND_COMMIT, 0, entry.worker_id, -1,
                              wire.control_body(body)))
        self.on_commit(body)  # the central node swaps too
        self.runner.on_committed(points, new_list, reset_to, case)

    def on_commit(self, body: dict):
        super().on_commit(body)
        reset_to = body.get("reset_to")
        if reset_to is not None:
            self.state.committed_forward_id = reset_to
            self.state.committed_backward_id = reset_to
            self.cursor = reset_to  # the trigger batch is re-forwarded
        self.state.status = 0
        self.deadlines.clear()
        self.phase = "train"


# ---------------------------------------------------------------------------
# drivers


class SimDriver:
    """Discrete-event execution: an idle node picks an action, the cost model
    prices it, and a completion event performs the math at that instant."""

    def __init__(self, runner: "Runner"):
        self.runner = runner
        self.busy: dict[int, bool] = {}

    def poke(self, node_id: int):
        node = self.runner.nodes.get(node_id)
        if node is not None:
            self.try_start(node)

    def poke_all(self):
        for node_id in list(self.runner.nodes):
            self.poke(node_id)

    def try_start(self, node: _Node):
        if node.worker is None or self.busy.get(node.node_id):
            return
        if self.runner.network.is_killed(node.node_id):
            return
        action = node.worker.schedule_next()
        if action is WAIT:
            return
        desc = node.worker.begin(action)
        self.runner.before_action(node, desc)
        if self.runner.network.is_killed(node.node_id):
            return  # killed the moment the action started; the work is lost
        dur = self.runner.cost.action_cost(node.node_id, desc.kind,
                                           node.worker.start, node.worker.end)
        self.busy[node.node_id] = True
        self.runner.network.schedule(dur, lambda: self._finish(node, desc, dur))

    def _finish(self, node: _Node, desc, dur: float):
        self.busy[node.node_id] = False
        if self.runner.nodes.get(node.node_id) is not node:
            return  # the node restarted while this action was in flight
        if self.runner.network.is_killed(node.node_id):
            return
        node.worker.complete(desc)
        self.runner.emit_action(node.worker.stage, desc, dur)
        node.worker.note_duration(desc, dur)
        self.try_start(node)


class LiveDriver:
    """One executor thread per node; messages arrive via reader threads and
    are funneled through per-node queues into the executor."""

    def __init__(self, runner: "Runner"):
        self.runner = runner
        self.inboxes: dict[int, queue.Queue] = {}
        self.threads: list[threading.Thread] = []
        self.running = True
        self.timers: list[tuple[float, object]] = []
        self._timer_lock = threading.Lock()

    def dispatch(self, node_id: int, msg: Message):
        self.inboxes[node_id].put(msg)

    def add_timer(self, delay: float, fn):
        with self._timer_lock:
            self.timers.append((self.runner.clock.now() + delay, fn))

    def start(self):
        for node_id in self.runner.nodes:
            self.inboxes.setdefault(node_id, queue.Queue())
            t = threading.Thread(target=self._loop, args=(node_id,), daemon=True)
            t.start()
            self.threads.append(t)

    def _loop(self, node_id: int):
        inbox = self.inboxes[node_id]
        while self.running:
            try:
                msg = inbox.get(timeout=0.002)
                node = self.runner.nodes.get(node_id)
                if node is not None and not self.runner.network.is_killed(node_id):
                    node.handle_message(msg)
                continue  # drain messages before computing
            except queue.Empty:
                pass
            node = self.runner.nodes.get(node_id)
            if node is None or self.runner.network.is_killed(node_id):
                continue
            if node_id == 0:
                self._run_central_timers(node)
            if node.worker is None:
                continue
            action = node.worker.schedule_next()
            if action is WAIT:
                continue
            desc = node.worker.begin(action)
            self.runner.before_action(node, desc)
            t0 = self.runner.clock.now()
            node.worker.complete(desc)
            dur = self.runner.clock.now() - t0
            self.runner.emit_action(node.worker.stage, desc, dur)
            node.worker.note_duration(desc, dur)

    def _run_central_timers(self, central: "CentralNode"):
        now = self.runner.clock.now()
        with self._timer_lock:
            due = [fn for t, fn in self.timers if t <= now]
            self.timers = [(t, fn) for t, fn in self.timers if t > now]
        for fn in due:
            fn()
        for batch, deadline in list(central.deadlines.items()):
            if deadline <= now:
                central.deadlines.pop(batch, None)
                central.on_timer(batch)

    def stop(self):
        self.running = False
        for t in self.threads:
            t.join(timeout=1.0)


# ---------------------------------------------------------------------------
# runner


class Runner:
    def __init__(self, config: ExperimentConfig, *, audit: bool = True,
                 resume: tuple[int, WeightSet, PartitionPoints] | None = None):
        self.config = config
        self.audit_enabled = audit
        self.rng = np.random.default_rng(config.seed)
        self.stack = build_stack(list(config.layer_dims))
        depth = len(self.stack)
        self.dataset = gaussian_clusters(
            seed=config.seed, samples=config.samples, features=config.n_features,
            classes=config.n_classes, batch_size=config.batch_size,
            noise=config.noise, val_fraction=config.val_fraction)
        self.total_batches = config.resolved_batches(self.dataset.batches_per_epoch)
        self.full_weights = initial_weights(self.stack, self.rng)
        if resume is not None:
            _, restored, _ = resume
            self.full_weights = restored
        self.resume = resume

        fwd, bwd = config.sim_costs()
        self.cost = CostModel(fwd, bwd, config.speed_factors)
        self.run_id = config.hash()[:12]
        self.sink = MetricsSink(self.run_id)
        self.recoveries: list[RecoveryAudit] = []
        self.aggregations: list[dict] = []
        self._audit_open: RecoveryAudit | None = None
        self.done = False
        self._fault_chain: list[FaultEvent] = []

        entries = tuple(WorkerEntry(i, f"node-{i}") for i in range(config.n_nodes))
        self.worker_list = WorkerList(entries)

        self.nodes: dict[int, _Node] = {}
        if config.mode == "sim":
            self.network = SimNetwork()
            self.clock = self.network.clock
            self.network._default_link = SimLink(bandwidth=config.bandwidth,
                                                 latency=config.latency)
            self.driver = SimDriver(self)
            for node_id in range(config.n_nodes):
                self.network.add_node(node_id, self._make_handler(node_id))
        else:
            ports = free_ports(config.n_nodes)
            addresses = {i: ("127.0.0.1", p) for i, p in enumerate(ports)}
            self.network = LiveNetwork(addresses)
            self.clock = self.network.clock
            self.driver = LiveDriver(self)
            for node_id in range(config.n_nodes):
                self.driver.inboxes[node_id] = queue.Queue()
                self.network.start_node(node_id, self._make_live_handler(node_id))

        # §III-B initialization order: load, profile, worker selection +
        # bandwidth measurement, initial partition, state distribution
        sample_x, sample_y = self.dataset.batch(0)
        cost_model = self.cost if config.mode == "sim" else None
        self.profile = profile_model(self.stack, self.full_weights, sample_x, sample_y,
                                     self.clock, cost_model,
                                     repetitions=config.profile_repetitions)
        self.bandwidths = self._measure_bandwidths()
        if resume is not None:
            self.points = resume[2]
        else:
            self.points = average_partition(depth, config.n_nodes, self.profile,
                                            self.bandwidths)
        self.timeout = config.timeout_factor * sum(self.profile.exec_time)
        if config.mode == "live":
            # profiled compute on the central node misses socket transfer
            # time entirely, so a bare multiple of it would false-trigger
            self.timeout = max(self.timeout, 1.0)

        central = CentralNode(self)
        self.nodes[0] = central
        for i in range(1, config.n_nodes):
            self.nodes[i] = WorkerNode(self, i)
        self.central = central
        if resume is not None:
            count = resume[0]
            central.cursor = count
            central.state.committed_forward_id = count - 1
            central.state.committed_backward_id = count - 1

        n = len(self.worker_list)
        for stage in range(n):
            node = self.nodes[self.worker_list.node_at(stage)]
            start, end = stage_bounds(self.points, stage, depth)
            ws = slice_weights(self.full_weights, start, end, version=0)
            node.worker = self.make_worker(node, stage, n, ws, generation=0)

        self.sink.emit({
            "event": "META", "t": self.clock.now(), "config_hash": config.hash(),
            "seed": config.seed, "mode": config.mode,
            "n_stages": n, "points": list(self.points.points),
            "total_layers": depth, "total_batches": self.total_batches,
            "in_flight_limit": config.pipeline.in_flight_limit or n,
            "exec_time": list(self.profile.exec_time),
        })
        self._arm_faults()

    # --- plumbing -----------------------------------------------------------

    def _make_handler(self, node_id: int):
        def handler(msg: Message):
            node = self.nodes.get(node_id)
            if node is not None:
                node.handle_message(msg)
                self.driver.poke(node_id)
        return handler

    def _make_live_handler(self, node_id: int):
        def handler(msg: Message):
            self.driver.dispatch(node_id, msg)
        return handler

    def make_worker(self, node: _Node, stage: int, n_stages: int, ws: WeightSet,
                    generation: int) -> StageWorker:
        cfg = self.config
        return StageWorker(
            node.node_id, stage, n_stages, self.stack, ws, node,
            learning_rate=cfg.learning_rate, momentum=cfg.momentum,
            weight_decay=cfg.weight_decay, pipeline=cfg.pipeline,
            replication=cfg.replication if cfg.replication_enabled else None,
            generation=generation)

    def _measure_bandwidths(self) -> BandwidthMatrix:
        n = self.config.n_nodes
        if n == 1:
            return BandwidthMatrix.infinite(0)
        rates = []
        for i in range(n - 1):
            rates.append(self.network.measure_bandwidth(i, i + 1))
        return BandwidthMatrix(tuple(rates))

    def emit(self, record: dict):
        rec = dict(record)
        rec.setdefault("t", self.clock.now())
        self.sink.emit(rec)

    def emit_action(self, stage: int, desc, dur: float):
        rec = {"event": desc.kind, "stage": stage, "batch": desc.batch_id,
               "version": desc.used_version, "pin": desc.pin, "dur": dur,
               "t": self.clock.now()}
        if desc.loss is not None:
            rec["loss"] = desc.loss
        self.sink.emit(rec)

    def schedule(self, delay: float, fn):
        if self.config.mode == "sim":
            self.network.schedule(delay, fn)
        else:
            self.driver.add_timer(delay, fn)

    def arm_timer(self, batch_id: int):
        if self.config.mode == "sim":
            self.network.schedule(self.timeout, lambda: self.central.on_timer(batch_id))
        else:
            self.central.deadlines[batch_id] = self.clock.now() + self.timeout

    def clear_timer(self, batch_id: int):
        if self.config.mode == "live":
            self.central.deadlines.pop(batch_id, None)

    def poke_all(self):
        if self.config.mode == "sim":
            self.driver.poke_all()

    def on_done(self):
        self.done = True

    # --- faults ---------------------------------------------------------------

    def _arm_faults(self):
        # events with `after` chain off the previously fired event; the rest
        # trigger on their own virtual time or batch marker
        chain: list[FaultEvent] = []
        for event in self.config.faults:
            if event.after is not None:
                chain.append(event)
            elif event.at_time is not None:
                self.schedule(event.at_time, lambda e=event: self.fire_fault(e))
        self._fault_chain = chain
        self._batch_triggers: dict[int, list[FaultEvent]] = {}
        for e in self.config.faults:
            if e.at_backward_start_of_batch is not None:
                self._batch_triggers.setdefault(e.at_backward_start_of_batch, []).append(e)

    def before_action(self, node: _Node, desc):
        if desc.kind != "B" or not node.worker.is_last:
            return
        for event in self._batch_triggers.pop(desc.batch_id, []):
            self.fire_fault(event)

    def fire_fault(self, event: FaultEvent):
        if event.kind == "node_kill":
            log.info("fault injection: killing node %d at t=%.4f", event.worker,
                     self.clock.now())
            self.network.kill(event.worker)
        elif event.kind == "node_restart":
            log.info("fault injection: restarting node %d (empty memory)", event.worker)
            self.network.restart(event.worker)
            fresh = WorkerNode(self, event.worker)
            fresh.restarted = True
            fresh.worker_list = self.worker_list
            self.nodes[event.worker] = fresh
        elif event.kind == "link_drop":
            peer = event.worker - 1 if event.worker > 0 else 1
            self.network.drop_link(event.worker, peer)
        # chained follow-ups
        if self._fault_chain:
            nxt = self._fault_chain.pop(0)
            self.schedule(nxt.after or 0.0, lambda e=nxt: self.fire_fault(e))

    # --- recovery glue ----------------------------------------------------------

    def recovery_partition(self, failed: list[int], new_list: WorkerList) -> PartitionPoints:
        n_new = len(new_list)
        if n_new == 1:
            return PartitionPoints(())
        if self.config.recovery_strategy == "absorb" and len(failed) == 1:
            return absorb_partition(self.points, failed[0], len(self.stack))
        # capacity of a surviving node derives from its last report over its
        # old stage; with no reports everyone is assumed equal
        factors = [1.0]
        for stage in range(1, n_new):
            node_id = new_list.node_at(stage)
            old_stage = self.worker_list.stage_of(node_id)
            if old_stage is not None and old_stage in self.central.reports:
                a, b = stage_bounds(self.points, old_stage, len(self.stack))
                factors.append(self.central.reports[old_stage] / self.profile.range_time(a, b))
            else:
                factors.append(1.0)
        caps = CapacityEstimate(tuple(factors))
        points, _ = optimal_partition(self.profile, caps, self.bandwidths, n_new)
        return points

    def begin_audit(self, report: FaultReport, case: str, failed: list[int],
                    new_points: PartitionPoints, old_list: WorkerList,
                    new_list: WorkerList):
        if not self.audit_enabled:
            return
        audit = RecoveryAudit(
            trigger=report.trigger_batch_id, case=case, failed_stages=list(failed),
            old_points=self.points.points, new_points=new_points.points,
            old_workers=[e.worker_id for e in old_list.entries],
            new_workers=[e.worker_id for e in new_list.entries])
        depth = len(self.stack)
        for stage in range(len(old_list)):
            node = self.nodes.get(old_list.node_at(stage))
            if node is None or node.worker is None:
                continue
            if self.network.is_killed(node.node_id):
                continue
            for layer in range(node.worker.start, node.worker.end + 1):
                audit.pre_live[layer] = _layer_bytes(node.worker.current, layer)
        for node in self.nodes.values():
            if self.network.is_killed(node.node_id):
                continue
            for origin in node.replica.origins():
                header, ws = node.replica.fetch_backup(origin)
                for layer in range(ws.start, ws.end + 1):
                    audit.chain_available[(node.node_id, layer)] = _layer_bytes(ws, layer)
        for origin in self.central.global_map.origins():
            header, ws = self.central.global_map.fetch_backup(origin)
            for layer in range(ws.start, ws.end + 1):
                audit.global_available[layer] = _layer_bytes(ws, layer)
        self._audit_open = audit

    def on_committed(self, points: PartitionPoints, new_list: WorkerList,
                     reset_to: int | None, case: str):
        self.points = points
        self.worker_list = new_list
        record = {
            "event": "REPART" if case == "dynamic" else "RECOVER",
            "points": list(points.points), "n_stages": len(new_list),
            "workers": [e.worker_id for e in new_list.entries],
        }
        if case != "dynamic":
            record["trigger"] = reset_to
            record["case"] = case
        self.emit(record)
        self.note_commit_applied(self.central)
        self.poke_all()

    def _all_commits_applied(self) -> bool:
        target = self.central.generation
        for entry in self.worker_list.entries:
            node = self.nodes.get(entry.worker_id)
            if node is None or node.worker is None or node.worker.generation != target:
                return False
        return True

    def _finalize_audit(self):
        audit = self._audit_open
        if audit is None:
            return
        self._audit_open = None
        for stage in range(len(self.worker_list)):
            node = self.nodes.get(self.worker_list.node_at(stage))
            if node is None or node.worker is None:
                continue
            for layer in range(node.worker.start, node.worker.end + 1):
                audit.post[layer] = (node.node_id, _layer_bytes(node.worker.current, layer))
        for node_id, prov in self.central.fetch_provenance.items():
            for layer, source in prov.items():
                audit.provenance[layer] = source
        self.recoveries.append(audit)

    def note_commit_applied(self, node: _Node):
        # post-recovery weight capture happens at the last commit application,
        # before any post-recovery optimizer step can run
        if self._audit_open is not None and self._all_commits_applied():
            self._finalize_audit()

    def note_aggregation(self, stage: int, snaps: list[WeightSet], agg: WeightSet):
        if self.audit_enabled:
            self.aggregations.append({"stage": stage, "snaps": list(snaps), "agg": agg,
                                      "t": self.clock.now()})

    # --- checkpointing -----------------------------------------------------------

    def write_checkpoint(self, count: int, global_map: ReplicaStore):
        path = self.config.checkpoint_path
        if not path:
            return
        header = {
            "count": count,
            "config_hash": self.config.hash(),
            "points": list(self.points.points),
            "workers": [e.worker_id for e in self.worker_list.entries],
            "stages": global_map.origins(),
        }
        blobs = [wire.canonical_json(header)]
        for origin in global_map.origins():
            _, ws = global_map.fetch_backup(origin)
            blobs.append(wire.encode_weightset(ws))
        out = b""
        for blob in blobs:
            out += len(blob).to_bytes(4, "big") + blob
        with open(path, "wb") as fh:
            fh.write(out)

    # --- run -------------------------------------------------------------------

    def run(self) -> RunResult:
        self.t_train_start = self.clock.now()
        if self.config.mode == "sim":
            self.driver.poke_all()
            self.network.run()
            if not self.done:
                raise RuntimeError(
                    f"training stalled at batch {self.central.state.committed_backward_id} "
                    f"(phase {self.central.phase})")
        else:
            self.driver.start()
            deadline = time.monotonic() + 300.0
            while not self.done and time.monotonic() < deadline:
                time.sleep(0.005)
            self.driver.stop()
            self.network.close()
            if not self.done:
                raise RuntimeError("live training did not finish before the deadline")

        parts = []
        for stage in range(len(self.worker_list)):
            node = self.nodes[self.worker_list.node_at(stage)]
            parts.append(node.worker.current)
        final = merge_weights(parts, version=0)
        return RunResult(
            config=self.config, run_id=self.run_id, records=self.sink.records,
            final_weights=final, dataset=self.dataset, stack=self.stack,
            profile=self.profile, recoveries=self.recoveries,
            aggregations=self.aggregations,
            completed_batches=self.central.state.committed_backward_id + 1)


def run_training(config: ExperimentConfig, *, audit: bool = True,
                 resume: tuple[int, WeightSet, PartitionPoints] | None = None) -> RunResult:
    return Runner(config, audit=audit, resume=resume).run()


def run_experiment(config: ExperimentConfig, out_path=None, *, audit: bool = True) -> RunResult:
    """A full experiment: the configured run plus any comparison sub-runs,
    with SUMMARY records appended before the metrics are written."""
    result = run_training(config, audit=audit)
    records = result.records
    if config.compare_frozen_uniform:
        frozen_cfg = config.replace(
            pipeline=replace(config.pipeline, dynamic_partition=False),
            compare_frozen_uniform=False)
        frozen = run_training(frozen_cfg, audit=False)
        repart_times = [r["t"] for r in records if r.get("event") == "REPART"]
        dyn_period = steady_state_period(records,
                                         after_time=repart_times[-1] if repart_times else None)
        frozen_period = steady_state_period(frozen.records)
        records.append({
            "event": "SUMMARY", "kind": "hetero_compare", "t": records[-1]["t"],
            "dynamic_period": dyn_period, "frozen_uniform_period": frozen_period,
            "ratio": (dyn_period / frozen_period) if dyn_period and frozen_period else None,
            "run": result.run_id,
        })
    if config.compare_recovery_strategies:
        absorb_cfg = config.replace(recovery_strategy="absorb",
                                    compare_recovery_strategies=False)
        absorb = run_training(absorb_cfg, audit=False)

        def post_recovery_period(recs):
            rec_times = [r["t"] for r in recs if r.get("event") == "RECOVER"]
            return steady_state_period(recs, after_time=rec_times[-1] if rec_times else None)

        records.append({
            "event": "SUMMARY", "kind": "recovery_compare", "t": records[-1]["t"],
            "redistribute_period": post_recovery_period(records),
            "absorb_period": post_recovery_period(absorb.records),
            "run": result.run_id,
        })
    if out_path is not None:
        from pathlib import Path
        Path(out_path).write_bytes(result.metrics_blob())
    return result


def load_checkpoint(path) -> tuple[dict, WeightSet]:
    """Read a central-node disk checkpoint back into a full-model WeightSet."""
    raw = open(path, "rb").read()
    chunks = []
    off = 0
    while off < len(raw):
        n = int.from_bytes(raw[off:off + 4], "big")
        off += 4
        chunks.append(raw[off:off + n])
        off += n
    import json as _json

    header = _json.loads(chunks[0].decode("utf-8"))
    parts = []
    for blob in chunks[1:]:
        ws, _ = wire.decode_weightset(blob)
        parts.append(ws)
    full = merge_weights(parts, version=0)
    return header, full


def restore_training(config: ExperimentConfig, checkpoint_path, *, audit: bool = True) -> RunResult:
    """Resume a run from the central node's disk checkpoint."""
    header, full = load_checkpoint(checkpoint_path)
    points = PartitionPoints(tuple(header["points"]))
    return run_training(config, audit=audit, resume=(int(header["count"]), full, points))
