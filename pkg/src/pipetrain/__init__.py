"""Fault-tolerant pipeline-parallel training for heterogeneous nodes.

A small exactly-checkable layered model is trained across a chain of
devices with asynchronous one-forward-one-backward pipelining, weight
stashing, vertical sync and periodic weight aggregation. Partition points
adapt to measured per-device capacity and link bandwidth; weights are
backed up by chain and global replication; and worker failures are
detected by the central node and repaired through weight redistribution
under a commit protocol. The whole system runs either as a deterministic
virtual-time simulation or as a live socket-based trainer.
"""

from .config import ExperimentConfig, config_from_dict, load_config
from .engine import PipelineConfig, ReplicationPolicy, StageWorker, TrainingState
from .model import (
    GradientSet,
    Layer,
    LayerStack,
    Tensor,
    WeightSet,
    aggregate_weights,
    backward_range,
    build_stack,
    forward_range,
    initial_weights,
    sgd_step,
)
from .partition import PartitionPoints, average_partition, exhaustive_partition, optimal_partition, stage_bounds
from .profiling import BandwidthMatrix, CapacityEstimate, LayerProfile, estimate_capacity, profile_model, scaled_layer_time
from .recovery import (
    FaultReport,
    RedistributionPlan,
    WorkerList,
    plan_redistribution,
    update_worker_list,
)
from .runner import RunResult, restore_training, run_experiment, run_training
from .verify import verify_records

__version__ = "0.1.0"
