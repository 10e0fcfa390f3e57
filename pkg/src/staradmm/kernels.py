"""Numerical kernels: sparse logistic loss, soft thresholding, FISTA.

The smooth local objective is

    f(x) = sum_n log(1 + exp(-b_n <a_n, x>)),

evaluated in the overflow-safe form log1p(exp(-t)) for t >= 0 and
-t + log1p(exp(t)) for t < 0. A worker's subproblem adds the quadratic
coupling (rho/2) ||x - v||^2 around an anchor v and is minimized with
FISTA using a backtracking Lipschitz estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NumericalFailure
from .problem import LocalDataset

# Lipschitz doublings allowed inside one backtracking search before the
# objective is declared numerically broken.
_MAX_BACKTRACKS = 200


@dataclass(frozen=True)
class FistaConfig:
    """Inner-solver options.

    min_iters forces a minimum number of iterations before any stopping
    test is applied (used to make worker loads uniform).
    """

    min_iters: int = 1
    grad_tol: float = 1e-2
    rel_improve_tol: float = 1e-12
    max_iters: int = 500
    initial_lipschitz: float = 1.0
    backtrack_factor: float = 2.0

    def __post_init__(self):
        if self.min_iters < 1 or self.min_iters > self.max_iters:
            raise ContractViolation("need 1 <= min_iters <= max_iters")
        if self.grad_tol <= 0 or self.rel_improve_tol <= 0:
            raise ContractViolation("tolerances must be strictly positive")
        if self.initial_lipschitz <= 0:
            raise ContractViolation("initial_lipschitz must be > 0")
        if self.backtrack_factor <= 1:
            raise ContractViolation("backtrack_factor must be > 1")


@dataclass(frozen=True)
class AugmentedObjective:
    """Local loss plus (rho/2) ||x - anchor||^2."""

    dataset: LocalDataset
    rho: float
    anchor: np.ndarray

    def __post_init__(self):
        if self.rho <= 0:
            raise ContractViolation("rho must be > 0")
        if len(self.anchor) != self.dataset.dim:
            raise ContractViolation("anchor length must equal the problem dimension")


def _check_dim(dataset: LocalDataset, x: np.ndarray):
    if len(x) != dataset.dim:
        raise ContractViolation(
            f"vector length {len(x)} does not match problem dimension {dataset.dim}"
        )


def _margins(dataset: LocalDataset, x: np.ndarray) -> np.ndarray:
    # t_n = b_n <a_n, x>, exploiting the uniform row width
    if dataset.num_rows == 0:
        return np.zeros(0)
    dots = (dataset.value_matrix() * x[dataset.col_matrix()]).sum(axis=1)
    return dataset.labels * dots


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logistic_loss(dataset: LocalDataset, x: np.ndarray) -> float:
    """sum_n log(1 + exp(-b_n <a_n, x>)) over the shard."""
    _check_dim(dataset, x)
    t = _margins(dataset, x)
    return float(np.logaddexp(0.0, -t).sum())


def logistic_grad(dataset: LocalDataset, x: np.ndarray) -> np.ndarray:
    """Gradient sum_n -b_n sigmoid(-t_n) a_n, returned dense."""
    _check_dim(dataset, x)
    if dataset.num_rows == 0:
        return np.zeros(dataset.dim)
    t = _margins(dataset, x)
    coef = -dataset.labels * _sigmoid(-t)
    w = dataset.value_matrix() * coef[:, None]
    return np.bincount(dataset.col_indices, weights=w.reshape(-1), minlength=dataset.dim)


def augmented_value(obj: AugmentedObjective, x: np.ndarray) -> float:
    d = x - obj.anchor
    return logistic_loss(obj.dataset, x) + 0.5 * obj.rho * float(d @ d)


def augmented_value_grad(obj: AugmentedObjective, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and gradient of the augmented local objective in one pass."""
    _check_dim(obj.dataset, x)
    d = x - obj.anchor
    quad = 0.5 * obj.rho * float(d @ d)
    if obj.dataset.num_rows == 0:
        return quad, obj.rho * d
    t = _margins(obj.dataset, x)
    value = float(np.logaddexp(0.0, -t).sum()) + quad
    coef = -obj.dataset.labels * _sigmoid(-t)
    w = obj.dataset.value_matrix() * coef[:, None]
    grad = np.bincount(obj.dataset.col_indices, weights=w.reshape(-1), minlength=obj.dataset.dim)
    grad += obj.rho * d
    return value, grad


def soft_threshold(a, b):
    """Shrink a toward zero by b: max(0, 1 - b/|a|) * a, with S(0, b) = 0.

    Works elementwise on arrays; b must be a nonnegative scalar.
    """
    if b < 0:
        raise ContractViolation("threshold must be >= 0")
    return np.sign(a) * np.maximum(np.abs(a) - b, 0.0)


def fista_minimize(
    obj: AugmentedObjective, x0: np.ndarray, cfg: FistaConfig
) -> tuple[np.ndarray, int]:
    """Minimize the augmented objective with FISTA and backtracking.

    The Lipschitz estimate starts at cfg.initial_lipschitz and only grows
    (by cfg.backtrack_factor) within a call; each call starts fresh.
    Stops at the first iteration k >= min_iters where the gradient norm is
    <= grad_tol or the relative objective improvement is <= rel_improve_tol,
    or at max_iters. Returns (iterate, iterations run).
    """
    _check_dim(obj.dataset, x0)
    lip = cfg.initial_lipschitz
    x = np.array(x0, dtype=float, copy=True)
    y = x.copy()
    t = 1.0
    f_prev = augmented_value(obj, x)
    if not math.isfinite(f_prev):
        raise NumericalFailure("objective not finite at the starting point", 0)
    for k in range(1, cfg.max_iters + 1):
        f_y, g_y = augmented_value_grad(obj, y)
        if not math.isfinite(f_y):
            raise NumericalFailure("objective not finite at extrapolated point", k)
        for _ in range(_MAX_BACKTRACKS):
            p = y - g_y / lip
            f_p = augmented_value(obj, p)
            step = p - y
            bound = f_y + float(g_y @ step) + 0.5 * lip * float(step @ step)
            # tiny slack absorbs cancellation when f_p ~ bound
            if f_p <= bound + 1e-12 * (1.0 + abs(f_y)):
                break
            lip *= cfg.backtrack_factor
        else:
            raise NumericalFailure("backtracking failed to certify a step", k)
        if not math.isfinite(f_p):
            raise NumericalFailure("objective not finite after step", k)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = p + ((t - 1.0) / t_next) * (p - x)
        x, t = p, t_next
        f_new, g_new = augmented_value_grad(obj, x)
        if k >= cfg.min_iters:
            if float(np.linalg.norm(g_new)) <= cfg.grad_tol:
                return x, k
            if f_prev <= 1e-300:  # nonnegative objective has stagnated at ~0
                return x, k
            if (f_prev - f_new) / f_prev <= cfg.rel_improve_tol:
                return x, k
        f_prev = f_new
    return x, k
