"""Experiment configuration: a JSON file validated into one value object.

The config hash pins everything that affects a run, so identical
(config, seed) pairs reproduce identical simulated metrics byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .engine import PipelineConfig, ReplicationPolicy
from .wire import canonical_json


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class FaultEvent:
    kind: str  # node_kill | node_restart | link_drop
    worker: int
    at_time: float | None = None
    at_backward_start_of_batch: int | None = None
    after: float | None = None  # delay relative to the previous event's firing

    def __post_init__(self):
        if self.kind not in ("node_kill", "node_restart", "link_drop"):
            raise ConfigError(f"unknown fault kind {self.kind!r}")
        if self.at_time is None and self.at_backward_start_of_batch is None and self.after is None:
            raise ConfigError("fault event needs a trigger time, batch, or delay")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 1
    prng: str = "pcg64"
    mode: str = "sim"
    layer_dims: tuple[int, ...] = (10, 16, 16, 3)
    # dataset
    samples: int = 400
    features: int | None = None  # defaults to layer_dims[0]
    classes: int | None = None  # defaults to layer_dims[-1]
    batch_size: int = 16
    noise: float = 1.0
    val_fraction: float = 0.25
    # training
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 4e-5
    total_batches: int = 100
    epochs: int | None = None  # overrides total_batches when set
    # pipeline / replication
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    replication: ReplicationPolicy = field(default_factory=ReplicationPolicy)
    replication_enabled: bool = True
    # roster and links
    n_nodes: int = 1
    speed_factors: tuple[float, ...] | None = None  # defaults to all 1.0
    bandwidth: float = 1e7
    latency: float = 1e-4
    # simulated per-layer compute cost, seconds
    forward_cost: tuple[float, ...] = ()
    backward_cost: tuple[float, ...] = ()
    profile_repetitions: int = 10
    # faults
    faults: tuple[FaultEvent, ...] = ()
    timeout_factor: float = 10.0
    probe_timeout: float = 0.05
    recovery_strategy: str = "redistribute"  # or "absorb"
    # checkpointing
    disk_checkpoint: bool = False
    checkpoint_path: str | None = None
    # comparison sub-runs emitted as SUMMARY records
    compare_frozen_uniform: bool = False
    compare_recovery_strategies: bool = False

    def __post_init__(self):
        if self.mode not in ("sim", "live"):
            raise ConfigError("mode must be sim or live")
        if self.prng != "pcg64":
            raise ConfigError("only the pcg64 generator is supported")
        if self.n_nodes < 1:
            raise ConfigError("need at least the central node")
        if self.speed_factors is None:
            object.__setattr__(self, "speed_factors", tuple([1.0] * self.n_nodes))
        if len(self.speed_factors) != self.n_nodes:
            raise ConfigError("speed_factors must list one factor per node")
        if self.recovery_strategy not in ("redistribute", "absorb"):
            raise ConfigError("recovery_strategy must be redistribute or absorb")
        depth = self.model_depth
        if self.n_nodes > depth:
            raise ConfigError(f"{self.n_nodes} nodes cannot split {depth} layers")
        if self.forward_cost and len(self.forward_cost) != depth:
            raise ConfigError("forward_cost must give one entry per layer")
        if self.backward_cost and len(self.backward_cost) != depth:
            raise ConfigError("backward_cost must give one entry per layer")
        if self.batch_size < 1 or self.samples < self.batch_size:
            raise ConfigError("need at least one full batch of samples")

    @property
    def model_depth(self) -> int:
        # dense+relu pairs plus final dense and softmax head
        return 2 * (len(self.layer_dims) - 1)

    @property
    def n_features(self) -> int:
        return self.features or self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.classes or self.layer_dims[-1]

    def resolved_batches(self, batches_per_epoch: int) -> int:
        if self.epochs is not None:
            return self.epochs * batches_per_epoch
        return self.total_batches

    def sim_costs(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        depth = self.model_depth
        fwd = self.forward_cost or tuple([0.004] * depth)
        bwd = self.backward_cost or fwd
        return fwd, bwd

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "prng": self.prng,
            "mode": self.mode,
            "layer_dims": list(self.layer_dims),
            "samples": self.samples,
            "features": self.features,
            "classes": self.classes,
            "batch_size": self.batch_size,
            "noise": self.noise,
            "val_fraction": self.val_fraction,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "total_batches": self.total_batches,
            "epochs": self.epochs,
            "pipeline": {
                "in_flight_limit": self.pipeline.in_flight_limit,
                "aggregation_base_interval": self.pipeline.aggregation_base_interval,
                "aggregation_enabled": self.pipeline.aggregation_enabled,
                "repartition_warmup": self.pipeline.repartition_warmup,
                "repartition_interval": self.pipeline.repartition_interval,
                "dynamic_partition": self.pipeline.dynamic_partition,
            },
            "replication": {
                "chain_interval": self.replication.chain_interval,
                "global_interval": self.replication.global_interval,
                "enabled": self.replication_enabled,
            },
            "n_nodes": self.n_nodes,
            "speed_factors": list(self.speed_factors),
            "bandwidth": self.bandwidth,
            "latency": self.latency,
            "forward_cost": list(self.forward_cost),
            "backward_cost": list(self.backward_cost),
            "profile_repetitions": self.profile_repetitions,
            "faults": [
                {k: v for k, v in {
                    "kind": f.kind, "worker": f.worker, "at_time": f.at_time,
                    "at_backward_start_of_batch": f.at_backward_start_of_batch,
                    "after": f.after,
                }.items() if v is not None}
                for f in self.faults
            ],
            "timeout_factor": self.timeout_factor,
            "probe_timeout": self.probe_timeout,
            "recovery_strategy": self.recovery_strategy,
            "disk_checkpoint": self.disk_checkpoint,
            "checkpoint_path": self.checkpoint_path,
            "compare_frozen_uniform": self.compare_frozen_uniform,
            "compare_recovery_strategies": self.compare_recovery_strategies,
        }
        return d

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict())).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        import dataclasses

        return dataclasses.replace(self, **changes)


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    pipe_raw = raw.pop("pipeline", {}) or {}
    repl_raw = raw.pop("replication", {}) or {}
    faults_raw = raw.pop("faults", []) or []
    known_pipe = {k: v for k, v in pipe_raw.items()
                  if k in PipelineConfig.__dataclass_fields__}
    pipeline = PipelineConfig(**known_pipe)
    replication_enabled = repl_raw.pop("enabled", True)
    known_repl = {k: v for k, v in repl_raw.items()
                  if k in ReplicationPolicy.__dataclass_fields__}
    replication = ReplicationPolicy(**known_repl)
    faults = tuple(FaultEvent(**f) for f in faults_raw)
    for seq_key in ("layer_dims", "speed_factors", "forward_cost", "backward_cost"):
        if seq_key in raw and raw[seq_key] is not None:
            raw[seq_key] = tuple(raw[seq_key])
    allowed = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(pipeline=pipeline, replication=replication,
                            replication_enabled=replication_enabled,
                            faults=faults, **raw)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)
