"""Matrix-free Jacobian-vector, adjoint, gradient, and curvature-vector
products for the composed measurement chain

    object, probe -> windowed views -> exit waves -> far field -> expected
    intensity -> expected magnitude,

differentiated in stacked real/imaginary coordinates. All operators share one
:class:`Linearization`, which caches the forward products at a fixed state so
repeated products (as in an inner CG loop) cost two transforms each.
"""

from __future__ import annotations

import enum
from typing import Optional

import numpy as np

from .bookkeeping import FlopCounter
from .core import COMPLEX_DTYPE, REAL_DTYPE, DiffractionStack, ModelState, ScanGeometry
from .forward import (
    expected_intensity,
    expected_magnitude,
    extract_views,
    far_field,
    inverse_far_field,
    scatter_views,
)
from .metrics import (
    MetricKind,
    metric_grad_intensity,
    metric_grad_magnitude,
    metric_hess_diag_intensity,
    metric_hess_diag_magnitude,
)


class VariableSelector(enum.Enum):
    """Which block of stacked real coordinates the operators act on."""

    OBJECT = "object"
    PROBE = "probe"
    JOINT = "joint"


class GGNBasis(enum.Enum):
    """Functional decomposition carrying the curvature sandwich."""

    MAGNITUDE = "magnitude"
    INTENSITY = "intensity"


def vector_length(sel: VariableSelector, geometry: ScanGeometry) -> int:
    n, m = geometry.object_size, geometry.probe_size
    if sel is VariableSelector.OBJECT:
        return 2 * n
    if sel is VariableSelector.PROBE:
        return 2 * m
    return 2 * (n + m)


def split_vector(
    v: np.ndarray, sel: VariableSelector, geometry: ScanGeometry
) -> tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    """Unstack a real coordinate vector into complex (object, probe) deltas."""
    v = np.asarray(v, dtype=REAL_DTYPE).ravel()
    if v.size != vector_length(sel, geometry):
        raise ValueError(
            f"vector length {v.size} does not match selector {sel.value} "
            f"(expected {vector_length(sel, geometry)})"
        )
    n, m = geometry.object_size, geometry.probe_size

    def _grid(chunk: np.ndarray, shape) -> np.ndarray:
        size = chunk.size // 2
        grid = np.empty(shape, dtype=COMPLEX_DTYPE)
        grid.real = chunk[:size].reshape(shape)
        grid.imag = chunk[size:].reshape(shape)
        return grid

    if sel is VariableSelector.OBJECT:
        return _grid(v, geometry.object_shape), None
    if sel is VariableSelector.PROBE:
        return None, _grid(v, geometry.probe_shape)
    return (
        _grid(v[: 2 * n], geometry.object_shape),
        _grid(v[2 * n :], geometry.probe_shape),
    )


def join_vector(
    g_object: Optional[np.ndarray], g_probe: Optional[np.ndarray], sel: VariableSelector
) -> np.ndarray:
    parts = []
    if sel in (VariableSelector.OBJECT, VariableSelector.JOINT):
        parts.append(np.ascontiguousarray(g_object.real, dtype=REAL_DTYPE).ravel())
        parts.append(np.ascontiguousarray(g_object.imag, dtype=REAL_DTYPE).ravel())
    if sel in (VariableSelector.PROBE, VariableSelector.JOINT):
        parts.append(np.ascontiguousarray(g_probe.real, dtype=REAL_DTYPE).ravel())
        parts.append(np.ascontiguousarray(g_probe.imag, dtype=REAL_DTYPE).ravel())
    return np.concatenate(parts)


class Linearization:
    """Forward products of one state, shared by all matrix-free operators."""

    def __init__(
        self,
        obj: np.ndarray,
        probe: np.ndarray,
        geometry: ScanGeometry,
        background: np.ndarray,
        sigma: float = 0.0,
        counter: Optional[FlopCounter] = None,
    ):
        self.geometry = geometry
        self.counter = counter
        self.object = np.asarray(obj, dtype=COMPLEX_DTYPE)
        self.probe = np.asarray(probe, dtype=COMPLEX_DTYPE)
        self.background = np.asarray(background, dtype=REAL_DTYPE)
        self.sigma = float(sigma)

        self.views = extract_views(self.object, geometry)
        psi = self.views * self.probe
        if counter is not None:
            counter.cmul(psi.size)
        self.psihat = far_field(psi, counter)
        self.h = expected_intensity(self.psihat, self.background, self.sigma, counter)
        self.zeta = expected_magnitude(self.h, counter)

        self._conj_probe: Optional[np.ndarray] = None
        self._conj_views: Optional[np.ndarray] = None
        self._wr: Optional[np.ndarray] = None  # Re(psihat)/zeta
        self._wi: Optional[np.ndarray] = None  # Im(psihat)/zeta
        self._hess_cache: dict[tuple[MetricKind, GGNBasis], np.ndarray] = {}
        self._work = np.empty_like(self.psihat)

    # cached factors ------------------------------------------------------

    @property
    def conj_probe(self) -> np.ndarray:
        if self._conj_probe is None:
            self._conj_probe = np.conj(self.probe)
        return self._conj_probe

    @property
    def conj_views(self) -> np.ndarray:
        if self._conj_views is None:
            self._conj_views = np.conj(self.views)
        return self._conj_views

    def _magnitude_weights(self) -> tuple[np.ndarray, np.ndarray]:
        if self._wr is None:
            inv = 1.0 / self.zeta
            self._wr = self.psihat.real * inv
            self._wi = self.psihat.imag * inv
            if self.counter is not None:
                self.counter.real(3 * self.zeta.size)
        return self._wr, self._wi

    def hess_diag(self, data: DiffractionStack, kind: MetricKind, basis: GGNBasis) -> np.ndarray:
        key = (kind, basis)
        if key not in self._hess_cache:
            if basis is GGNBasis.MAGNITUDE:
                self._hess_cache[key] = metric_hess_diag_magnitude(
                    self.zeta, data.patterns, kind, self.counter
                )
            else:
                self._hess_cache[key] = metric_hess_diag_intensity(
                    self.h, data.patterns, kind, self.counter
                )
        return self._hess_cache[key]

    # operators ------------------------------------------------------------

    def jvp(
        self, v: np.ndarray, sel: VariableSelector, basis: GGNBasis = GGNBasis.MAGNITUDE
    ) -> np.ndarray:
        """Directional derivative of the stacked magnitudes (or intensities)."""
        d_obj, d_probe = split_vector(v, sel, self.geometry)
        counter = self.counter
        dpsi = self._work
        if d_obj is not None:
            extract_views(d_obj, self.geometry, out=dpsi)
            np.multiply(dpsi, self.probe, out=dpsi)
            if counter is not None:
                counter.cmul(dpsi.size)
            if d_probe is not None:
                dpsi += self.views * d_probe
                if counter is not None:
                    counter.cmul(dpsi.size)
                    counter.cadd(dpsi.size)
        else:
            np.multiply(self.views, d_probe, out=dpsi)
            if counter is not None:
                counter.cmul(dpsi.size)
        dpsihat = far_field(dpsi, counter)
        if basis is GGNBasis.MAGNITUDE:
            wr, wi = self._magnitude_weights()
            out = wr * dpsihat.real
            out += wi * dpsihat.imag
        else:
            out = self.psihat.real * dpsihat.real
            out += self.psihat.imag * dpsihat.imag
            out *= 2.0
        if counter is not None:
            counter.real(3 * out.size)
        return out.astype(REAL_DTYPE, copy=False)

    def jtvp(
        self, w: np.ndarray, sel: VariableSelector, basis: GGNBasis = GGNBasis.MAGNITUDE
    ) -> np.ndarray:
        """Adjoint product: stacked data-space weights back to coordinates."""
        if w.shape != self.zeta.shape:
            raise ValueError(f"weight shape {w.shape} != data shape {self.zeta.shape}")
        counter = self.counter
        u = self._work
        if basis is GGNBasis.MAGNITUDE:
            wr, wi = self._magnitude_weights()
            u.real = w * wr
            u.imag = w * wi
        else:
            np.multiply(self.psihat, 2.0 * w, out=u)
        if counter is not None:
            counter.real(3 * u.size)
        g_psi = inverse_far_field(u, counter)
        g_obj = g_probe = None
        if sel in (VariableSelector.OBJECT, VariableSelector.JOINT):
            if sel is VariableSelector.JOINT:
                weighted = g_psi * self.conj_probe
            else:
                weighted = np.multiply(g_psi, self.conj_probe, out=g_psi)
            g_obj = scatter_views(weighted, self.geometry)
            if counter is not None:
                counter.cmul(weighted.size)
                counter.cadd(weighted.size)
        if sel in (VariableSelector.PROBE, VariableSelector.JOINT):
            g_probe = np.einsum("kij,kij->ij", self.conj_views, g_psi)
            if counter is not None:
                counter.cmul(g_psi.size)
                counter.cadd(g_psi.size)
        return join_vector(g_obj, g_probe, sel)

    def data_residual_grad(self, data: DiffractionStack, kind: MetricKind, basis: GGNBasis) -> np.ndarray:
        if basis is GGNBasis.MAGNITUDE:
            return metric_grad_magnitude(self.zeta, data.patterns, kind, self.counter)
        return metric_grad_intensity(self.h, data.patterns, kind, self.counter)

    def gradient(
        self,
        data: DiffractionStack,
        kind: MetricKind,
        sel: VariableSelector,
        basis: GGNBasis = GGNBasis.MAGNITUDE,
    ) -> np.ndarray:
        return self.jtvp(self.data_residual_grad(data, kind, basis), sel, basis)

    def ggn_vec(
        self,
        v: np.ndarray,
        data: DiffractionStack,
        kind: MetricKind,
        sel: VariableSelector,
        basis: GGNBasis = GGNBasis.MAGNITUDE,
    ) -> np.ndarray:
        jw = self.jvp(v, sel, basis)
        jw *= self.hess_diag(data, kind, basis)
        if self.counter is not None:
            self.counter.real(jw.size)
        return self.jtvp(jw, sel, basis)


def _linearize(
    state: ModelState,
    geometry: ScanGeometry,
    background: np.ndarray,
    sigma: float,
    counter: Optional[FlopCounter],
) -> Linearization:
    return Linearization(state.object, state.probe, geometry, background, sigma, counter)


def jvp(
    state: ModelState,
    geometry: ScanGeometry,
    background: np.ndarray,
    sigma: float,
    v: np.ndarray,
    sel: VariableSelector,
    basis: GGNBasis = GGNBasis.MAGNITUDE,
    counter: Optional[FlopCounter] = None,
) -> np.ndarray:
    return _linearize(state, geometry, background, sigma, counter).jvp(v, sel, basis)


def jtvp(
    state: ModelState,
    geometry: ScanGeometry,
    background: np.ndarray,
    sigma: float,
    w: np.ndarray,
    sel: VariableSelector,
    basis: GGNBasis = GGNBasis.MAGNITUDE,
    counter: Optional[FlopCounter] = None,
) -> np.ndarray:
    return _linearize(state, geometry, background, sigma, counter).jtvp(w, sel, basis)


def gradient(
    state: ModelState,
    geometry: ScanGeometry,
    data: DiffractionStack,
    sigma: float,
    kind: MetricKind,
    sel: VariableSelector,
    basis: GGNBasis = GGNBasis.MAGNITUDE,
    counter: Optional[FlopCounter] = None,
) -> np.ndarray:
    lin = _linearize(state, geometry, data.background, sigma, counter)
    return lin.gradient(data, kind, sel, basis)


def ggn_vec(
    state: ModelState,
    geometry: ScanGeometry,
    data: DiffractionStack,
    sigma: float,
    v: np.ndarray,
    kind: MetricKind,
    sel: VariableSelector,
    basis: GGNBasis = GGNBasis.MAGNITUDE,
    counter: Optional[FlopCounter] = None,
) -> np.ndarray:
    lin = _linearize(state, geometry, data.background, sigma, counter)
    return lin.ggn_vec(v, data, kind, sel, basis)
