"""Consensus-ADMM state machines for worker and scheduler.

Each worker w keeps a local copy x^w of the decision vector plus a running
dual u^w; the scheduler averages omega^w = x^w + u^w over workers, applies
the l1 proximal step to get the new global z, and adapts the penalty from
the primal/dual residuals.

One worker iteration, given the (rho, z) received for iteration k:

    r   <- x - z            (consensus residual of the previous iterate)
    u   <- u + r
    x   <- argmin f_w(x) + (rho/2) ||x - (z - u)||^2    (FISTA, warm start)
    send q = ||r||^2 and omega = x + u
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, ProtocolViolation
from .kernels import AugmentedObjective, FistaConfig, fista_minimize, soft_threshold
from .problem import LocalDataset


@dataclass
class WorkerState:
    """Live local variables of one worker."""

    x: np.ndarray
    u: np.ndarray
    z: np.ndarray
    rho: float
    iter: int = 0
    last_inner_iters: int = 0

    @classmethod
    def initial(cls, dim: int, rho0: float) -> "WorkerState":
        # x0 = u0 = z0 = 0
        return cls(x=np.zeros(dim), u=np.zeros(dim), z=np.zeros(dim), rho=rho0)


@dataclass
class SchedulerState:
    """Global variables plus the per-iteration reduction buffer.

    Contributions are staged per worker and summed in worker-id order, so
    the accumulator values do not depend on arrival order at all (bitwise
    reproducible traces).
    """

    dim: int
    rho: float
    iter: int = 0
    z_curr: np.ndarray = None
    z_prev: np.ndarray = None
    arrived: dict = field(default_factory=dict)  # worker id -> (q_w, omega_w / W)

    def __post_init__(self):
        if self.z_curr is None:
            self.z_curr = np.zeros(self.dim)
        if self.z_prev is None:
            self.z_prev = np.zeros(self.dim)

    @property
    def q_accum(self) -> float:
        return float(sum(q for q, _ in (self.arrived[w] for w in sorted(self.arrived))))

    @property
    def omega_accum(self) -> np.ndarray:
        total = np.zeros(self.dim)
        for w in sorted(self.arrived):
            total += self.arrived[w][1]
        return total

    def advance(self, rho_next: float) -> None:
        # iteration boundary: q <- 0, omega <- 0, k <- k + 1
        self.arrived.clear()
        self.rho = rho_next
        self.iter += 1


@dataclass(frozen=True)
class Tolerances:
    primal_tol: float
    dual_tol: float
    max_outer: int

    def __post_init__(self):
        if self.primal_tol <= 0 or self.dual_tol <= 0:
            raise ContractViolation("residual tolerances must be positive")
        if self.max_outer < 0:
            raise ContractViolation("max_outer must be >= 0")


def worker_step(
    state: WorkerState,
    rho_new: float,
    z_new: np.ndarray,
    dataset: LocalDataset,
    cfg: FistaConfig,
) -> tuple[float, np.ndarray]:
    """Run one worker iteration against the freshly received (rho, z)."""
    state.z = np.asarray(z_new, dtype=float)
    state.rho = float(rho_new)
    r = state.x - state.z
    state.u = state.u + r
    obj = AugmentedObjective(dataset, state.rho, state.z - state.u)
    state.x, state.last_inner_iters = fista_minimize(obj, state.x, cfg)
    state.iter += 1
    q = float(r @ r)
    return q, state.x + state.u


def reduce_update(
    state: SchedulerState, worker: int, q_w: float, omega_w: np.ndarray, num_workers: int
) -> None:
    """Fold one worker's (q, omega) into the iteration accumulators."""
    if worker in state.arrived:
        raise ProtocolViolation(
            f"duplicate update from worker {worker} at iteration {state.iter}"
        )
    state.arrived[worker] = (float(q_w), np.asarray(omega_w, dtype=float) / num_workers)


def z_update(
    omega_bar: np.ndarray, rho: float, l1_weight: float, num_workers: int
) -> np.ndarray:
    """Proximal step of the l1 term: soft threshold at l1 / (W rho)."""
    if rho <= 0 or num_workers < 1:
        raise ContractViolation("need rho > 0 and num_workers >= 1")
    return soft_threshold(omega_bar, l1_weight / (num_workers * rho))


def residuals(state: SchedulerState) -> tuple[float, float]:
    """Primal r = sqrt(sum_w q_w), dual s = rho ||z_curr - z_prev||."""
    r = float(np.sqrt(state.q_accum))
    s = state.rho * float(np.linalg.norm(state.z_curr - state.z_prev))
    return r, s


def new_penalty(rho: float, r: float, s: float) -> float:
    """Residual-balancing rule: double on large primal, halve on large dual."""
    if r > 10.0 * s:
        return 2.0 * rho
    if s > 10.0 * r:
        return 0.5 * rho
    return rho


def converged(r: float, s: float, k: int, tol: Tolerances) -> bool:
    """True when both residuals pass or the iteration budget is spent."""
    if r <= tol.primal_tol and s <= tol.dual_tol:
        return True
    return k + 1 >= tol.max_outer
