"""Distributed consensus-ADMM for sparse l1-logistic regression.

A scheduler orchestrates stateless workers over a star network; each
worker regenerates its data shard from the problem description, solves
its augmented subproblem with FISTA, and the scheduler soft-thresholds
the averaged iterates into the global solution. Includes local
in-process and TCP/process backends plus a benchmark harness for
speedup, utilization, cold-start, and responsiveness measurements.
"""

from .admm import SchedulerState, Tolerances, WorkerState, converged, new_penalty, reduce_update, residuals, worker_step, z_update
from .driver import RunConfig, bench, solve
from .kernels import AugmentedObjective, FistaConfig, augmented_value_grad, fista_minimize, logistic_grad, logistic_loss, soft_threshold
from .metrics import RunReport, TimingLedger, aggregate, derive_comm_queue, efficiency, responsiveness_histogram, speedup
from .problem import LocalDataset, ProblemSpec, SampleRange, generate_shard, partition
from .runtime import ExitCause, SpawnRequest, WorkerOutcome, cold_start_time, spawn_pool, worker_main
from .transport import Message, Reason, Variant, decode, encode

__version__ = "0.1.0"

__all__ = [
    "AugmentedObjective", "ExitCause", "FistaConfig", "LocalDataset", "Message",
    "ProblemSpec", "Reason", "RunConfig", "RunReport", "SampleRange",
    "SchedulerState", "SpawnRequest", "TimingLedger", "Tolerances", "Variant",
    "WorkerOutcome", "WorkerState", "aggregate", "augmented_value_grad", "bench",
    "cold_start_time", "converged", "decode", "derive_comm_queue", "efficiency",
    "encode", "fista_minimize", "generate_shard", "logistic_grad", "logistic_loss",
    "new_penalty", "partition", "reduce_update", "residuals",
    "responsiveness_histogram", "soft_threshold", "solve", "spawn_pool", "speedup",
    "worker_main", "worker_step", "z_update",
]
