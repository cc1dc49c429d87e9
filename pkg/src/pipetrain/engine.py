"""Per-stage asynchronous pipeline execution.

Each stage runs one-forward-one-backward scheduling with a per-stage
in-flight cap (limit - stage_index, so stage i keeps at most n-i batches in
flight under the default limit of n). A batch is pinned to a *sync point*
when it enters stage 0 -- the number of backward passes stage 0 had
committed at that moment -- and every stage processes the batch with the
weights it held right after that many of its own backward passes. That
realizes vertical sync even though stages aggregate (and therefore bump
their version numbers) at different cadences.

Weight stashing keeps the exact WeightSet used by a forward until its
backward runs; the optimizer step always applies to the stage's current
weights. After every (n - i) * base backward passes a stage averages its
last n - i weight versions (the concurrently-live lineages) into a new
current version.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import asdict, dataclass, field

from . import wire
from .model import (
    LayerStack,
    StashViolation,
    WeightSet,
    aggregate_weights,
    backward_range,
    cross_entropy,
    forward_range,
    loss_upstream,
    sgd_step,
)
from .transport import Message

log = logging.getLogger(__name__)


class VerticalSyncError(RuntimeError):
    """A stage was asked to forward a batch with a sync point it no longer holds."""


@dataclass
class PipelineConfig:
    """Knobs for the asynchronous pipeline.

    ``in_flight_limit`` of None resolves to the stage count. Dynamic
    re-partition first runs after ``repartition_warmup`` batches of epoch 0
    and then every ``repartition_interval`` batches.
    """

    in_flight_limit: int | None = None
    aggregation_base_interval: int = 1
    aggregation_enabled: bool = True
    repartition_warmup: int = 10
    repartition_interval: int = 100
    dynamic_partition: bool = True

    def __post_init__(self):
        if self.in_flight_limit is not None and self.in_flight_limit < 1:
            raise ValueError("in_flight_limit must be positive")
        if self.aggregation_base_interval < 1:
            raise ValueError("aggregation_base_interval must be positive")
        if self.repartition_warmup < 1 or self.repartition_interval < 1:
            raise ValueError("repartition schedule values must be positive")


@dataclass
class TrainingState:
    """The state variables synchronized to every node at initialization."""

    learning_rate: float
    batch_number: int
    committed_forward_id: int = -1
    committed_backward_id: int = -1
    epoch_number: int = 0
    status: int = 0  # 0 normal, 1 fault recovery

    def to_table(self) -> dict:
        return {
            "committed_forward_id": self.committed_forward_id,
            "committed_backward_id": self.committed_backward_id,
            "learning_rate": self.learning_rate,
            "epoch_number": self.epoch_number,
            "batch_number": self.batch_number,
            "status": self.status,
        }


@dataclass(frozen=True)
class BatchMeta:
    """Travels with a batch: identity, pinned sync point, recovery generation."""

    batch_id: int
    pin: int
    generation: int

    def to_dict(self) -> dict:
        return {"batch": self.batch_id, "pin": self.pin, "gen": self.generation}

    @classmethod
    def from_dict(cls, d: dict) -> "BatchMeta":
        return cls(int(d["batch"]), int(d["pin"]), int(d["gen"]))


class StashStore:
    """Map batch_id -> (activation record, WeightSet used at forward time).

    An entry lives from the forward until the matching backward pops it.
    """

    def __init__(self):
        self._items: dict[int, tuple] = {}

    def put(self, batch_id: int, record, weights: WeightSet):
        self._items[batch_id] = (record, weights)

    def pop(self, batch_id: int):
        return self._items.pop(batch_id, None)

    def clear(self):
        self._items.clear()

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, batch_id: int) -> bool:
        return batch_id in self._items


@dataclass(frozen=True)
class Forward:
    batch_id: int


@dataclass(frozen=True)
class Backward:
    batch_id: int


class _Wait:
    def __repr__(self):
        return "Wait"


WAIT = _Wait()


@dataclass
class ActionDesc:
    """Handle for a two-phase action: begin() dequeues, complete() computes."""

    kind: str  # "F" or "B"
    batch_id: int
    item: tuple
    used_version: int | None = None
    pin: int | None = None
    loss: float | None = None


@dataclass(frozen=True)
class ReplicationPolicy:
    """Chain/global backup cadence, counted in per-stage committed backwards."""

    chain_interval: int = 50
    global_interval: int = 100

    def __post_init__(self):
        if self.chain_interval < 1 or self.global_interval < 1:
            raise ValueError("replication intervals must be positive")


class StageWorker:
    """One pipeline stage's executor state machine.

    Driven by an environment that delivers messages and schedules the two
    action phases; the worker owns all weight/stash/schedule state and is
    identical in simulated and live modes.
    """

    def __init__(
        self,
        node_id: int,
        stage_index: int,
        n_stages: int,
        stack: LayerStack,
        weights: WeightSet,
        env,
        *,
        learning_rate: float,
        momentum: float = 0.9,
        weight_decay: float = 4e-5,
        pipeline: PipelineConfig | None = None,
        replication: ReplicationPolicy | None = None,
        generation: int = 0,
    ):
        self.node_id = node_id
        self.stack = stack
        self.env = env
        self.lr = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.pipeline = pipeline or PipelineConfig()
        self.replication = replication
        self.replica_count = 0  # cumulative, survives resets
        self.paused = False
        self._configure(stage_index, n_stages, weights, generation)

    # --- (re)configuration --------------------------------------------------

    def _configure(self, stage_index: int, n_stages: int, weights: WeightSet, generation: int):
        self.stage = stage_index
        self.n_stages = n_stages
        self.start = weights.start
        self.end = weights.end
        self.current = weights
        limit = self.pipeline.in_flight_limit or n_stages
        self.cap = max(1, limit - stage_index)
        self.lineage: deque[WeightSet] = deque(maxlen=max(n_stages - stage_index, 1))
        self.generation = generation
        self.fwd_queue: deque[tuple] = deque()
        self.bwd_queue: deque[tuple] = deque()
        self.stash = StashStore()
        self.pending_loss: dict[int, float] = {}
        self.sync_store: dict[int, WeightSet] = {0: weights}
        self.backward_count = 0
        self.inflight = 0
        self.last_action: str | None = None
        self.window_busy = 0.0
        self.window_batches = 0

    def rebuild(self, stage_index: int, n_stages: int, weights: WeightSet, generation: int):
        """Swap to a new sub-model after a committed re-partition or recovery."""
        self._configure(stage_index, n_stages, weights, generation)

    def apply_reset(self, generation: int):
        """Reset training state in place, keeping the current weights."""
        self._configure(self.stage, self.n_stages, self.current, generation)

    @property
    def is_last(self) -> bool:
        return self.stage == self.n_stages - 1

    # --- message intake -----------------------------------------------------

    def enqueue_activation(self, meta: BatchMeta, x, labels):
        if meta.generation != self.generation:
            return
        self.fwd_queue.append((meta, x, labels))

    def enqueue_gradient(self, meta: BatchMeta, grad, reports: dict):
        if meta.generation != self.generation:
            return
        self.bwd_queue.append((meta, grad, reports))

    # --- scheduling -----------------------------------------------------------

    def schedule_next(self):
        """Next action under 1F1B: backwards preferred, forwards capped.

        A stage at its in-flight cap must drain a backward before the next
        forward; below the cap it alternates, taking a pending backward
        unless the previous action was already a backward and a forward is
        possible.
        """
        if self.paused:
            return WAIT
        if self.bwd_queue and (self.inflight >= self.cap or self.last_action != "B"):
            return Backward(self.bwd_queue[0][0].batch_id)
        if self.inflight < self.cap:
            nxt = self._next_forward_batch()
            if nxt is not None:
                return Forward(nxt)
        if self.bwd_queue:
            return Backward(self.bwd_queue[0][0].batch_id)
        return WAIT

    def _next_forward_batch(self):
        if self.stage == 0:
            return self.env.peek_batch()
        if self.fwd_queue:
            return self.fwd_queue[0][0].batch_id
        return None

    def begin(self, action) -> ActionDesc:
        if isinstance(action, Backward):
            item = self.bwd_queue.popleft()
            return ActionDesc("B", item[0].batch_id, item)
        if self.stage == 0:
            batch_id = self.env.claim_batch()
            x, labels = self.env.fetch_batch(batch_id)
            meta = BatchMeta(batch_id, self.backward_count, self.generation)
            return ActionDesc("F", batch_id, (meta, x, labels))
        item = self.fwd_queue.popleft()
        return ActionDesc("F", item[0].batch_id, item)

    def complete(self, desc: ActionDesc):
        if desc.kind == "F":
            self._complete_forward(desc)
        else:
            self._complete_backward(desc)

    def note_duration(self, desc: ActionDesc, duration: float):
        """Feed executed-action time into the capacity report window."""
        self.window_busy += duration
        if desc.kind == "B":
            self.window_batches += 1

    # --- forward ------------------------------------------------------------

    def _complete_forward(self, desc: ActionDesc):
        meta, x, labels = desc.item
        if self.stage == 0:
            weights = self.current
        else:
            weights = self.sync_store.get(meta.pin)
            if weights is None:
                raise VerticalSyncError(
                    f"stage {self.stage} has no weights for sync point {meta.pin} "
                    f"(batch {meta.batch_id})"
                )
        out, record = forward_range(self.stack, weights, x, self.start, self.end)
        self.stash.put(meta.batch_id, record, weights)
        self._prune_sync_store(meta.pin)
        self.inflight += 1
        self.last_action = "F"
        desc.used_version = weights.version
        desc.pin = meta.pin

        if self.is_last:
            probs = out.data
            loss = cross_entropy(probs, labels)
            self.pending_loss[meta.batch_id] = loss
            grad = loss_upstream(probs, labels)
            self.bwd_queue.append((meta, grad, {}))
        else:
            body = wire.activation_body(meta.to_dict(), out.data, labels)
            self.env.send(Message(wire.KIND_ACTIVATION, self.node_id,
                                  self.env.route(self.stage + 1), meta.batch_id, body))
        if self.stage == 0:
            self.env.forward_committed(meta.batch_id)

    def _prune_sync_store(self, pin: int):
        stale = [k for k in self.sync_store if k < pin]
        for k in stale:
            del self.sync_store[k]

    # --- backward -------------------------------------------------------------

    def _complete_backward(self, desc: ActionDesc):
        meta, grad_in, reports = desc.item
        entry = self.stash.pop(meta.batch_id)
        if entry is None:
            raise StashViolation(f"no stash for batch {meta.batch_id} at stage {self.stage}")
        record, w_used = entry
        grads, g_down = backward_range(self.stack, w_used, record, grad_in,
                                       batch_id=meta.batch_id)
        stepped = sgd_step(self.current, grads, self.lr, self.momentum, self.weight_decay)
        self.current = stepped
        self.backward_count += 1
        self.replica_count += 1
        self.lineage.append(stepped)
        agg = self.maybe_aggregate()
        if agg is not None:
            self.current = agg
            self.lineage.append(agg)
        self.sync_store[self.backward_count] = self.current
        self.inflight -= 1
        self.last_action = "B"
        desc.used_version = w_used.version
        desc.pin = meta.pin
        desc.loss = self.pending_loss.pop(meta.batch_id, None)

        self._maybe_replicate()

        if self.stage > 0:
            out_reports = dict(reports)
            if self.window_batches > 0:
                out_reports[str(self.stage)] = self.window_busy / self.window_batches
            body = wire.gradient_body({"meta": meta.to_dict(), "reports": out_reports},
                                      g_down.data)
            self.env.send(Message(wire.KIND_GRADIENT, self.node_id,
                                  self.env.route(self.stage - 1), meta.batch_id, body))
        else:
            self.env.backward_committed(meta.batch_id,
                                        {int(k): float(v) for k, v in reports.items()})

    # --- weight aggregation -----------------------------------------------------

    def maybe_aggregate(self) -> WeightSet | None:
        """Average the n-i live lineages when the backward count hits the interval.

        At the last stage n-i is 1 and aggregation is the identity, so it is
        skipped entirely (no version bump, no event).
        """
        lineages = self.n_stages - self.stage
        if not self.pipeline.aggregation_enabled or lineages < 2:
            return None
        if self.backward_count % (self.pipeline.aggregation_base_interval * lineages) != 0:
            return None
        if len(self.lineage) < lineages:
            return None
        snaps = list(self.lineage)
        agg = aggregate_weights(snaps)
        self.env.emit({
            "event": "AGG", "stage": self.stage, "batch": None,
            "versions_in": [w.version for w in snaps], "version": agg.version,
        })
        self.env.aggregate_hook(self.stage, snaps, agg)
        return agg

    # --- replication triggers ------------------------------------------------

    def _maybe_replicate(self):
        if self.replication is None:
            return
        count = self.replica_count
        if self.stage >= 1 and count % self.replication.chain_interval == 0:
            succ = self.stage + 1
            dest = 0 if succ >= self.n_stages else self.env.route(succ)
            self._send_snapshot(dest, "chain", count)
        if count % self.replication.global_interval == 0:
            if self.stage == 0:
                self.env.store_global(self.current, count)
            else:
                self._send_snapshot(0, "global", count)
            self.env.emit({
                "event": "REPL", "stage": self.stage, "kind": "global", "count": count,
                "dest": 0, "start": self.start, "end": self.end,
                "version": self.current.version,
            })

    def _send_snapshot(self, dest: int, kind: str, count: int):
        header = {"origin_stage": self.stage, "batch_id": count,
                  "version": self.current.version, "kind": kind}
        body = wire.snapshot_body(header, self.current)
        self.env.send(Message(wire.KIND_WEIGHT_SNAPSHOT, self.node_id, dest, -1, body))
        if kind == "chain":
            self.env.emit({
                "event": "REPL", "stage": self.stage, "kind": "chain", "count": count,
                "dest": dest, "start": self.start, "end": self.end,
                "version": self.current.version,
            })
