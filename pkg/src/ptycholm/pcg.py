"""Truncated preconditioned conjugate gradients for the damped curvature
systems, with warm starts and relative-residual termination."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .bookkeeping import FlopCounter
from .core import REAL_DTYPE

ETA_FLOOR = 1e-6


@dataclass(frozen=True)
class LinearOperator:
    """Matrix-free symmetric PSD operator on stacked real coordinates."""

    apply: Callable[[np.ndarray], np.ndarray]
    dim: int


@dataclass
class PCGResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residual: np.ndarray  # recurrence residual rhs - A x at exit


def _dot(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False)))


def truncation_eta(grad_norm: float, beta: float) -> float:
    """Relative-residual tolerance min(beta, sqrt(grad_norm)), kept in (0, 1)."""
    if grad_norm < 0:
        raise ValueError("gradient norm must be nonnegative")
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    return float(min(beta, max(math.sqrt(grad_norm), ETA_FLOOR)))


def pcg_solve(
    A: LinearOperator,
    rhs: np.ndarray,
    precond_diag: np.ndarray,
    x0: Optional[np.ndarray] = None,
    eta: float = 0.1,
    max_iters: int = 100,
    counter: Optional[FlopCounter] = None,
) -> PCGResult:
    """Solve A x = rhs to a relative residual of eta with Jacobi-preconditioned CG.

    Returns the best iterate with converged=False if max_iters is exhausted or
    the curvature pairing loses positivity through roundoff.
    """
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    rhs = np.asarray(rhs, dtype=REAL_DTYPE)
    precond_diag = np.asarray(precond_diag, dtype=REAL_DTYPE)
    if np.any(precond_diag <= 0):
        raise ValueError("preconditioner diagonal must be strictly positive")

    rhs_norm = math.sqrt(_dot(rhs, rhs))
    if rhs_norm == 0.0:
        zero = np.zeros_like(rhs)
        return PCGResult(zero, 0, True, zero.copy())

    if x0 is None or not np.any(x0):
        x = np.zeros_like(rhs)
        r = rhs.copy()
    else:
        x = np.asarray(x0, dtype=REAL_DTYPE).copy()
        r = rhs - A.apply(x)
    if not np.all(np.isfinite(r)):
        raise FloatingPointError("non-finite residual; operator is ill-posed")

    tol = eta * rhs_norm
    inv_diag = 1.0 / precond_diag
    z = r * inv_diag
    p = z.copy()
    rz = _dot(r, z)
    iterations = 0
    while iterations < max_iters:
        if math.sqrt(_dot(r, r)) <= tol:
            return PCGResult(x, iterations, True, r)
        Ap = A.apply(p)
        pAp = _dot(p, Ap)
        if not math.isfinite(pAp):
            raise FloatingPointError("non-finite curvature pairing; operator is ill-posed")
        if pAp <= 0.0:
            return PCGResult(x, iterations, False, r)
        alpha = rz / pAp
        x += REAL_DTYPE(alpha) * p
        r -= REAL_DTYPE(alpha) * Ap
        z = r * inv_diag
        rz_next = _dot(r, z)
        beta = rz_next / rz
        p = z + REAL_DTYPE(beta) * p
        rz = rz_next
        iterations += 1
        if counter is not None:
            counter.real(10 * rhs.size)
    converged = math.sqrt(_dot(r, r)) <= tol
    return PCGResult(x, iterations, converged, r)
