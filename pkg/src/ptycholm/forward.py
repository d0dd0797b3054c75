"""Ptychographic forward model: windowed illumination, far-field propagation,
expected intensities/magnitudes, and the decaying surrogate offset schedule.

The far-field propagator uses the orthonormal (unitary) DFT convention so the
photon budget is conserved between the object and detector planes.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import scipy.fft as _fft

from .bookkeeping import FlopCounter
from .core import COMPLEX_DTYPE, REAL_DTYPE, ModelState, ScanGeometry

SURROGATE_FLOOR = 1e-4


def extract_view(obj: np.ndarray, geometry: ScanGeometry, k: int) -> np.ndarray:
    """Probe-sized window of the object at scan position k (pure read)."""
    if not 0 <= k < geometry.num_positions:
        raise IndexError(f"position {k} out of range (K={geometry.num_positions})")
    r, c = geometry.offsets[k]
    mx, my = geometry.probe_shape
    return obj[r : r + mx, c : c + my].copy()


def scatter_adjoint(
    view: np.ndarray, geometry: ScanGeometry, k: int, accumulator: np.ndarray
) -> np.ndarray:
    """Add a probe-shaped view into the object-shaped accumulator at offset k.

    Adjoint of :func:`extract_view` under the complex inner product.
    """
    if not 0 <= k < geometry.num_positions:
        raise IndexError(f"position {k} out of range (K={geometry.num_positions})")
    if view.shape != geometry.probe_shape:
        raise ValueError(f"view shape {view.shape} != probe shape {geometry.probe_shape}")
    if accumulator.shape != geometry.object_shape:
        raise ValueError(
            f"accumulator shape {accumulator.shape} != object shape {geometry.object_shape}"
        )
    r, c = geometry.offsets[k]
    mx, my = geometry.probe_shape
    accumulator[r : r + mx, c : c + my] += view
    return accumulator


def extract_views(obj: np.ndarray, geometry: ScanGeometry, out: Optional[np.ndarray] = None) -> np.ndarray:
    """All K probe-sized windows stacked as (K, Mx, My)."""
    mx, my = geometry.probe_shape
    if out is None:
        out = np.empty((geometry.num_positions, mx, my), dtype=obj.dtype)
    for k, (r, c) in enumerate(geometry.offsets):
        out[k] = obj[r : r + mx, c : c + my]
    return out


def scatter_views(
    stack: np.ndarray, geometry: ScanGeometry, out: Optional[np.ndarray] = None
) -> np.ndarray:
    """Accumulate a (K, Mx, My) stack into an object-shaped grid.

    The accumulation is sequential over k, so the result is deterministic.
    """
    mx, my = geometry.probe_shape
    if out is None:
        out = np.zeros(geometry.object_shape, dtype=stack.dtype)
    for k, (r, c) in enumerate(geometry.offsets):
        out[r : r + mx, c : c + my] += stack[k]
    return out


def exit_wave(state: ModelState, geometry: ScanGeometry, k: int) -> np.ndarray:
    """Transmitted wave at position k: probe times the extracted object view."""
    return state.probe * extract_view(state.object, geometry, k)


def far_field(psi: np.ndarray, counter: Optional[FlopCounter] = None) -> np.ndarray:
    """Unitary 2-D DFT over the trailing two axes (energy preserving)."""
    out = _fft.fft2(psi, norm="ortho", axes=(-2, -1))
    if counter is not None:
        n = psi.shape[-1] * psi.shape[-2]
        batch = int(np.prod(psi.shape[:-2])) if psi.ndim > 2 else 1
        counter.fft(n, batch)
    return out


def inverse_far_field(psihat: np.ndarray, counter: Optional[FlopCounter] = None) -> np.ndarray:
    """Inverse (adjoint) of :func:`far_field` under the unitary convention."""
    out = _fft.ifft2(psihat, norm="ortho", axes=(-2, -1))
    if counter is not None:
        n = psihat.shape[-1] * psihat.shape[-2]
        batch = int(np.prod(psihat.shape[:-2])) if psihat.ndim > 2 else 1
        counter.fft(n, batch)
    return out


def expected_intensity(
    psihat: np.ndarray,
    background: np.ndarray,
    sigma: float = 0.0,
    counter: Optional[FlopCounter] = None,
) -> np.ndarray:
    """Expected detector intensity |psihat|^2 + background + sigma (> 0)."""
    if sigma < 0:
        raise ValueError("surrogate offset must be nonnegative")
    background = np.asarray(background, dtype=REAL_DTYPE)
    if np.any(background <= 0):
        raise ValueError("background must be strictly positive")
    h = np.abs(psihat) ** 2
    h += background
    if sigma:
        h += REAL_DTYPE(sigma)
    if counter is not None:
        counter.real(5 * h.size)
    return h.astype(REAL_DTYPE, copy=False)


def expected_magnitude(h: np.ndarray, counter: Optional[FlopCounter] = None) -> np.ndarray:
    """Elementwise square root of a strictly positive expected intensity."""
    if np.any(h <= 0):
        raise ValueError("expected intensity must be strictly positive")
    if counter is not None:
        counter.real(h.size)
    return np.sqrt(h)


def forward_magnitudes(
    state: ModelState,
    geometry: ScanGeometry,
    background: np.ndarray,
    sigma: float = 0.0,
    counter: Optional[FlopCounter] = None,
) -> np.ndarray:
    """Expected magnitudes for all scan positions, stacked as (K, Mx, My)."""
    views = extract_views(state.object, geometry)
    psi = views
    np.multiply(views, state.probe, out=psi)
    if counter is not None:
        counter.cmul(psi.size)
    psihat = far_field(psi, counter)
    h = expected_intensity(psihat, background, sigma, counter)
    return expected_magnitude(h, counter)


def surrogate_schedule(t: int, num_iterations: int, sigma0: float, floor: float = SURROGATE_FLOOR) -> float:
    """Decaying intensity offset: log-spaced from sigma0 down to `floor` over
    iterations 0..num_iterations-1, exactly zero afterwards."""
    if num_iterations < 1:
        raise ValueError("schedule length must be >= 1")
    if sigma0 <= 0:
        raise ValueError("initial offset must be positive")
    if t >= num_iterations:
        return 0.0
    if t < 0:
        raise ValueError("iteration index must be nonnegative")
    if num_iterations == 1:
        return float(sigma0)
    frac = t / (num_iterations - 1)
    return float(sigma0 * (floor / sigma0) ** frac)
