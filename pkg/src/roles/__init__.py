"""Role programs and the model math they share."""
from .aggregator import Aggregator, GlobalAggregator, distribute, upload_delays
from .base import Role
from .coordinated import CoordinatedAggregator, CoordinatedGlobalAggregator, CoordinatedTrainer
from .coordinator import (Coordinator, CoordinatorState, assign_trainers, coordinator_step,
                          get_coord_ends, receive_assignment)
from .data import SyntheticDataset, load_dataset, synthetic_url
from .distributed import DistributedTrainer, HybridAggregator, HybridTrainer
from .metrics import METRICS_HEADER, MetricsWriter, RoundMetrics, merge_metrics, read_job_metrics, read_metrics
from .model import ModelUpdate, ModelWeights, fedavg_aggregate, local_train
from .registry import PROGRAMS, code_ref, resolve_program
from .trainer import Trainer

__all__ = [
    "Aggregator", "GlobalAggregator", "distribute", "upload_delays", "Role",
    "CoordinatedAggregator", "CoordinatedGlobalAggregator", "CoordinatedTrainer",
    "Coordinator", "CoordinatorState", "assign_trainers", "coordinator_step", "get_coord_ends",
    "receive_assignment", "SyntheticDataset", "load_dataset", "synthetic_url",
    "DistributedTrainer", "HybridAggregator", "HybridTrainer",
    "METRICS_HEADER", "MetricsWriter", "RoundMetrics", "merge_metrics", "read_job_metrics", "read_metrics",
    "ModelUpdate", "ModelWeights", "fedavg_aggregate", "local_train",
    "PROGRAMS", "code_ref", "resolve_program", "Trainer",
]
