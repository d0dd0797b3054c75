"""Gaussian and Poisson error metrics in magnitude- and intensity-based form,
with data-space gradients and Hessian diagonals.

Magnitude form, per pixel with zeta = sqrt(h) and measured counts y:

* Gaussian: 0.5 * (zeta - sqrt(y))^2
* Poisson:  zeta^2 - y * log(zeta^2)

Both decompositions of either metric have identical values and gradients; the
Hessian diagonals differ and define the two curvature sandwiches.
"""

from __future__ import annotations

import enum
from typing import Optional

import numpy as np

from .bookkeeping import FlopCounter
from .core import REAL_DTYPE


class MetricKind(enum.Enum):
    GAUSSIAN = "gaussian"
    POISSON = "poisson"


def _check_positive(arr: np.ndarray, name: str) -> None:
    if np.any(arr <= 0):
        raise ValueError(f"{name} must be strictly positive")


def metric_value(
    zeta: np.ndarray,
    y: np.ndarray,
    kind: MetricKind,
    counter: Optional[FlopCounter] = None,
) -> float:
    """Total error metric over all pixels; accumulated in double precision."""
    if zeta.shape != y.shape:
        raise ValueError(f"shape mismatch: {zeta.shape} vs {y.shape}")
    _check_positive(zeta, "magnitudes")
    z = zeta.astype(np.float64, copy=False)
    yy = y.astype(np.float64, copy=False)
    if kind is MetricKind.GAUSSIAN:
        r = z - np.sqrt(yy)
        value = 0.5 * float(np.sum(r * r))
        if counter is not None:
            counter.real(4 * zeta.size)
    else:
        z2 = z * z
        value = float(np.sum(z2 - yy * np.log(z2)))
        if counter is not None:
            counter.real(5 * zeta.size)
    if not np.isfinite(value):
        raise FloatingPointError("error metric is not finite")
    return value


def metric_grad_magnitude(
    zeta: np.ndarray,
    y: np.ndarray,
    kind: MetricKind,
    counter: Optional[FlopCounter] = None,
) -> np.ndarray:
    """Derivative of the metric with respect to the expected magnitudes."""
    _check_positive(zeta, "magnitudes")
    if kind is MetricKind.GAUSSIAN:
        out = zeta - np.sqrt(y, dtype=REAL_DTYPE)
        if counter is not None:
            counter.real(2 * zeta.size)
    else:
        out = 2.0 * zeta - 2.0 * y / zeta
        if counter is not None:
            counter.real(4 * zeta.size)
    return out.astype(REAL_DTYPE, copy=False)


def metric_hess_diag_magnitude(
    zeta: np.ndarray,
    y: np.ndarray,
    kind: MetricKind,
    counter: Optional[FlopCounter] = None,
) -> np.ndarray:
    """Diagonal of the data-space Hessian in the magnitude decomposition.

    Strictly positive for both kinds, so the curvature sandwich is PSD.
    """
    _check_positive(zeta, "magnitudes")
    if kind is MetricKind.GAUSSIAN:
        out = np.ones_like(zeta, dtype=REAL_DTYPE)
        if counter is not None:
            counter.real(zeta.size)
    else:
        out = 2.0 + 2.0 * y / (zeta * zeta)
        if counter is not None:
            counter.real(4 * zeta.size)
    return out.astype(REAL_DTYPE, copy=False)


def metric_grad_intensity(
    h: np.ndarray,
    y: np.ndarray,
    kind: MetricKind,
    counter: Optional[FlopCounter] = None,
) -> np.ndarray:
    """Derivative with respect to the expected intensities h.

    Chain-ruled through zeta = sqrt(h) this reproduces the magnitude gradient.
    """
    _check_positive(h, "intensities")
    if kind is MetricKind.GAUSSIAN:
        out = 0.5 * (1.0 - np.sqrt(y / h))
        if counter is not None:
            counter.real(4 * h.size)
    else:
        out = 1.0 - y / h
        if counter is not None:
            counter.real(2 * h.size)
    return out.astype(REAL_DTYPE, copy=False)


def metric_hess_diag_intensity(
    h: np.ndarray,
    y: np.ndarray,
    kind: MetricKind,
    counter: Optional[FlopCounter] = None,
) -> np.ndarray:
    """Diagonal of the data-space Hessian in the intensity decomposition."""
    _check_positive(h, "intensities")
    if kind is MetricKind.GAUSSIAN:
        out = 0.25 * np.sqrt(y) * h ** -1.5
        if counter is not None:
            counter.real(4 * h.size)
    else:
        out = y / (h * h)
        if counter is not None:
            counter.real(3 * h.size)
    return out.astype(REAL_DTYPE, copy=False)
