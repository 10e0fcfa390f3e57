"""Single-machine reference solvers used as correctness oracles.

Two independent paths:

* `prox_grad_reference`: accelerated proximal gradient on the full composite
  objective loss(x) + l1 ||x||_1, run to high accuracy. No consensus
  machinery at all; used to certify final objective values.
* `monolithic_admm_reference`: the two-block ADMM recursion written as one
  straight-line loop (x-update, z-update, dual update), with the same
  residual bookkeeping and penalty rule as the distributed scheduler. Used
  to check that the W=1 distributed run reproduces it exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .admm import Tolerances, converged, new_penalty
from .kernels import (
    AugmentedObjective,
    FistaConfig,
    fista_minimize,
    logistic_loss,
    logistic_grad,
    soft_threshold,
)
from .problem import LocalDataset, ProblemSpec, SampleRange, generate_shard


def full_objective(spec: ProblemSpec, x: np.ndarray, chunk: int = 50_000) -> float:
    """loss + l1 penalty over the entire instance, generated in chunks."""
    total = spec.l1_weight * float(np.abs(x).sum())
    for start in range(0, spec.num_samples, chunk):
        part = generate_shard(spec, SampleRange(start, min(start + chunk, spec.num_samples)))
        total += logistic_loss(part, x)
    return total


def dataset_objective(dataset: LocalDataset, l1_weight: float, x: np.ndarray) -> float:
    return logistic_loss(dataset, x) + l1_weight * float(np.abs(x).sum())


def prox_grad_reference(
    dataset: LocalDataset,
    l1_weight: float,
    tol: float = 1e-8,
    max_iters: int = 50_000,
) -> np.ndarray:
    """Accelerated proximal gradient for loss + l1, to gradient-map norm tol.

    The termination quantity is ||L (x - prox(x - grad/L))||, the norm of
    the proximal gradient mapping, which vanishes exactly at a minimizer.
    """
    d = dataset.dim
    x = np.zeros(d)
    y = x.copy()
    t = 1.0
    lip = 1.0
    f_y = logistic_loss(dataset, y)
    for _ in range(max_iters):
        g_y = logistic_grad(dataset, y)
        while True:
            p = soft_threshold(y - g_y / lip, l1_weight / lip)
            step = p - y
            f_p = logistic_loss(dataset, p)
            if f_p <= f_y + float(g_y @ step) + 0.5 * lip * float(step @ step) + 1e-12 * (
                1.0 + abs(f_y)
            ):
                break
            lip *= 2.0
        # gradient mapping at x = p itself (one extra pass, but exact)
        g_p = logistic_grad(dataset, p)
        mapped = lip * (p - soft_threshold(p - g_p / lip, l1_weight / lip))
        if float(np.linalg.norm(mapped)) <= tol:
            return p
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = p + ((t - 1.0) / t_next) * (p - x)
        x, t = p, t_next
        f_y = logistic_loss(dataset, y)
    return x


@dataclass
class ReferenceTrace:
    z_history: list  # z after each iteration boundary
    r_history: list
    s_history: list
    rho_history: list  # rho in effect during each iteration
    converged_by_tolerance: bool


def monolithic_admm_reference(
    dataset: LocalDataset,
    l1_weight: float,
    rho0: float,
    fista_cfg: FistaConfig,
    tol: Tolerances,
) -> ReferenceTrace:
    """Two-block ADMM in one process, mirroring the distributed bookkeeping.

    x_{k+1} minimizes loss + (rho_k/2)||x - (z_k - u_k)||^2 (warm started),
    z_{k+1} soft-thresholds x_{k+1} + u_k at l1/rho_k, and u accumulates
    x - z. The reported primal residual at iteration k is ||x_k - z_k||
    (the lagged consensus gap, matching what workers report).
    """
    d = dataset.dim
    x = np.zeros(d)
    u = np.zeros(d)
    z = np.zeros(d)
    rho = rho0
    trace = ReferenceTrace([], [], [], [], False)
    for k in range(tol.max_outer):
        q = float((x - z) @ (x - z))
        obj = AugmentedObjective(dataset, rho, z - u)
        x, _ = fista_minimize(obj, x, fista_cfg)
        z_prev = z
        z = soft_threshold(x + u, l1_weight / rho)
        u = u + x - z
        r = float(np.sqrt(q))
        s = rho * float(np.linalg.norm(z - z_prev))
        trace.z_history.append(z.copy())
        trace.r_history.append(r)
        trace.s_history.append(s)
        trace.rho_history.append(rho)
        if converged(r, s, k, tol):
            trace.converged_by_tolerance = r <= tol.primal_tol and s <= tol.dual_tol
            break
        rho = new_penalty(rho, r, s)
    return trace
