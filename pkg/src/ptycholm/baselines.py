"""First-order reference algorithms: ePIE, Polak-Ribiere (P)NCG, Nesterov
momentum, PHeBIE, and ADMM.

All runs return the final estimate(s) plus a per-iteration trace; seeds make
stochastic orderings reproducible.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from .bookkeeping import ConvergenceTrace, FlopCounter, TraceRow
from .core import COMPLEX_DTYPE, REAL_DTYPE, DiffractionStack, ModelState, ScanGeometry
from .forward import extract_views, far_field, inverse_far_field, scatter_views
from .lm import ConstraintSet, Monitor, objective_value, project_magnitude
from .matfree import GGNBasis, Linearization, VariableSelector
from .metrics import (
    MetricKind,
    metric_grad_intensity,
    metric_grad_magnitude,
    metric_hess_diag_intensity,
    metric_value,
)
from .precond import floor_diag, object_ggn_diag, real_basis_diag

ARMIJO_C = 1e-4
MAX_HALVINGS = 30


def _record(
    trace: ConvergenceTrace,
    t: int,
    f: float,
    ls_iters: int,
    counter: Optional[FlopCounter],
    monitor: Optional[Monitor],
    state: ModelState,
) -> None:
    extra = monitor(t, state) if monitor is not None else {}
    trace.append(TraceRow(
        iteration=t, f=f,
        eps_object=extra.get("eps_object"), eps_probe=extra.get("eps_probe"),
        ls_iters=ls_iters, flops=counter.total if counter is not None else 0,
    ))


def coverage_map(probe: np.ndarray, geometry: ScanGeometry) -> np.ndarray:
    """Sum of |probe|^2 embedded at every scan position (object-shaped)."""
    p2 = (np.abs(probe) ** 2).astype(REAL_DTYPE)
    acc = np.zeros(geometry.object_shape, dtype=REAL_DTYPE)
    mx, my = geometry.probe_shape
    for r, c in geometry.offsets:
        acc[r : r + mx, c : c + my] += p2
    return acc


# ---------------------------------------------------------------------------
# ePIE


def epie_epoch(
    state: ModelState,
    geometry: ScanGeometry,
    data: DiffractionStack,
    rng_seed: int,
    counter: Optional[FlopCounter] = None,
) -> ModelState:
    """One stochastic sweep over all patterns with concurrent object/probe
    updates, step sizes being the inverse Lipschitz constants of the partial
    gradients. Gaussian metric only."""
    obj = state.object.copy()
    probe = state.probe.copy()
    mx, my = geometry.probe_shape
    order = np.random.default_rng(rng_seed).permutation(geometry.num_positions)
    b = data.background
    for k in order:
        r, c = geometry.offsets[k]
        view = obj[r : r + mx, c : c + my].copy()
        psi = probe * view
        psihat = far_field(psi, counter)
        h = np.abs(psihat) ** 2 + b
        zeta = np.sqrt(h)
        w = metric_grad_magnitude(zeta, data.patterns[k], MetricKind.GAUSSIAN)
        g_psi = inverse_far_field((w / zeta) * psihat, counter)
        g_view = np.conj(probe) * g_psi
        g_probe = np.conj(view) * g_psi
        p2max = float(np.max(np.abs(probe) ** 2))
        v2max = float(np.max(np.abs(view) ** 2))
        if p2max == 0.0 and v2max == 0.0:
            raise ZeroDivisionError("both probe and object view vanish; step undefined")
        alpha = 1.0 / p2max if p2max > 0 else 0.0
        gamma = 1.0 / v2max if v2max > 0 else 0.0
        obj[r : r + mx, c : c + my] = view - REAL_DTYPE(alpha) * g_view
        probe = probe - REAL_DTYPE(gamma) * g_probe
        if counter is not None:
            counter.cmul(4 * psi.size)
            counter.real(8 * psi.size)
    return ModelState(obj, probe, state.optimize_object, state.optimize_probe,
                      state.surrogate_offset)


def epie_run(
    init: ModelState,
    geometry: ScanGeometry,
    data: DiffractionStack,
    seed: int,
    max_iters: int,
    monitor: Optional[Monitor] = None,
    counter: Optional[FlopCounter] = None,
) -> tuple[np.ndarray, np.ndarray, ConvergenceTrace]:
    state = ModelState(init.object.copy(), init.probe.copy(), True, True)
    trace = ConvergenceTrace()
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=max_iters)
    for t in range(max_iters):
        state = epie_epoch(state, geometry, data, int(seeds[t]), counter)
        f = objective_value(state.object, state.probe, geometry, data, 0.0,
                            MetricKind.GAUSSIAN, counter)
        _record(trace, t, f, 0, counter, monitor, state)
    return state.object, state.probe, trace


# ---------------------------------------------------------------------------
# Nonlinear conjugate gradients (Polak-Ribiere, optionally preconditioned)


def ncg_run(
    init: ModelState,
    geometry: ScanGeometry,
    data: DiffractionStack,
    kind: MetricKind,
    preconditioned: bool,
    max_iters: int,
    basis: GGNBasis = GGNBasis.MAGNITUDE,
    precond_diag_fn: Optional[Callable[[Linearization, DiffractionStack], np.ndarray]] = None,
    monitor: Optional[Monitor] = None,
    counter: Optional[FlopCounter] = None,
) -> tuple[np.ndarray, ConvergenceTrace]:
    """PR+ nonlinear CG over the object with adaptive Armijo backtracking.

    The preconditioned variant weights the inner products by the inverse
    curvature diagonal; non-descent directions restart from steepest descent.
    """
    obj = init.object.copy()
    probe = init.probe
    state = ModelState(obj, probe)
    trace = ConvergenceTrace()

    cov = coverage_map(probe, geometry)
    alpha0 = 1.0 / float(cov.max()) if cov.max() > 0 else 1.0
    alpha_prev = alpha0

    g_prev = None
    z_prev_dot = None
    d = None
    for t in range(max_iters):
        lin = Linearization(obj, probe, geometry, data.background, 0.0, counter)
        f0 = metric_value(lin.zeta, data.patterns, kind, counter)
        g = lin.gradient(data, kind, VariableSelector.OBJECT, basis)
        if preconditioned:
            if precond_diag_fn is not None:
                diag = precond_diag_fn(lin, data)
            else:
                dmap = object_ggn_diag(state, geometry, data, 0.0, kind, counter, lin)
                diag = floor_diag(real_basis_diag(dmap))
            z = g / diag
        else:
            z = g
        zg = float(np.dot(z.astype(np.float64), g.astype(np.float64)))
        if d is None:
            d = -z
        else:
            beta = max(0.0, float(np.dot(z.astype(np.float64),
                                         (g - g_prev).astype(np.float64))) / z_prev_dot)
            d = -z + REAL_DTYPE(beta) * d
        gd = float(np.dot(g.astype(np.float64), d.astype(np.float64)))
        if gd >= 0.0:
            d = -z
            gd = -zg
        g_prev = g
        z_prev_dot = zg

        ls = 0

        def backtrack(direction, slope):
            nonlocal ls
            step = 2.0 * alpha_prev
            for _ in range(MAX_HALVINGS + 1):
                cand = obj + REAL_DTYPE(step) * _as_complex(direction, geometry.object_shape)
                f_cand = objective_value(cand, probe, geometry, data, 0.0, kind, counter)
                ls += 1
                if f_cand <= f0 + ARMIJO_C * step * slope:
                    return cand, f_cand, step
                step *= 0.5
            return None, None, None

        cand_obj, f1, alpha = backtrack(d, gd)
        if cand_obj is None and gd != -zg:
            d = -z  # conjugacy exhausted; fall back to steepest descent
            gd = -zg
            cand_obj, f1, alpha = backtrack(d, gd)
        if cand_obj is None:
            _record(trace, t, f0, ls, counter, monitor, state)
            break
        obj = cand_obj
        state = ModelState(obj, probe)
        alpha_prev = alpha
        _record(trace, t, f1, ls, counter, monitor, state)
    return obj, trace


def _as_complex(v: np.ndarray, shape) -> np.ndarray:
    n = v.size // 2
    grid = np.empty(shape, dtype=COMPLEX_DTYPE)
    grid.real = v[:n].reshape(shape)
    grid.imag = v[n:].reshape(shape)
    return grid


# ---------------------------------------------------------------------------
# Nesterov accelerated gradient (Gaussian metric)


def nag_momentum(j: int) -> float:
    return (j + 2) / (j + 5)


def nag_run(
    init: ModelState,
    geometry: ScanGeometry,
    data: DiffractionStack,
    max_iters: int,
    monitor: Optional[Monitor] = None,
    counter: Optional[FlopCounter] = None,
) -> tuple[np.ndarray, ConvergenceTrace]:
    """Momentum descent with the fixed (j+2)/(j+5) schedule and the inverse
    coverage bound as step size; velocity starts at zero."""
    obj = init.object.copy()
    probe = init.probe
    trace = ConvergenceTrace()
    cov = coverage_map(probe, geometry)
    alpha = REAL_DTYPE(1.0 / float(cov.max()))
    velocity = np.zeros(2 * geometry.object_size, dtype=REAL_DTYPE)
    for t in range(max_iters):
        lin = Linearization(obj, probe, geometry, data.background, 0.0, counter)
        g = lin.gradient(data, MetricKind.GAUSSIAN, VariableSelector.OBJECT)
        velocity = REAL_DTYPE(nag_momentum(t)) * velocity - alpha * g
        obj = obj + _as_complex(velocity, geometry.object_shape)
        state = ModelState(obj, probe)
        f = objective_value(obj, probe, geometry, data, 0.0, MetricKind.GAUSSIAN, counter)
        _record(trace, t, f, 0, counter, monitor, state)
    return obj, trace


# ---------------------------------------------------------------------------
# PHeBIE (proximal block implicit-explicit splitting, Gaussian metric)


def phebie_step_sizes(
    obj: np.ndarray, probe: np.ndarray, geometry: ScanGeometry
) -> tuple[float, float]:
    """Inverse partial-Lipschitz step sizes for the object and probe blocks."""
    cov = coverage_map(probe, geometry)
    alpha = 1.0 / float(cov.max()) if cov.max() > 0 else 1.0
    views = extract_views(obj, geometry)
    v2 = float(np.sum(np.abs(views) ** 2, axis=0).max())
    gamma = 1.0 / v2 if v2 > 0 else 1.0
    return alpha, gamma


def phebie_run(
    init: ModelState,
    geometry: ScanGeometry,
    data: DiffractionStack,
    constraints: ConstraintSet,
    max_iters: int,
    monitor: Optional[Monitor] = None,
    counter: Optional[FlopCounter] = None,
) -> tuple[np.ndarray, np.ndarray, ConvergenceTrace]:
    """Projected explicit steps on object then probe against the auxiliary
    exit waves, followed by the data-magnitude refresh of the exit waves."""
    obj = init.object.copy()
    probe = init.probe.copy()
    sqrt_y = np.sqrt(data.patterns)
    trace = ConvergenceTrace()
    # auxiliary transmitted waves, initialized consistently with the state
    psi = extract_views(obj, geometry) * probe
    for t in range(max_iters):
        views = extract_views(obj, geometry)
        resid = probe * views - psi
        if counter is not None:
            counter.cmul(2 * resid.size)
            counter.cadd(2 * resid.size)
        alpha, _ = phebie_step_sizes(obj, probe, geometry)
        g_obj = scatter_views(np.conj(probe) * resid, geometry)
        obj = obj - REAL_DTYPE(alpha) * g_obj
        if constraints.object_bound is not None:
            obj = project_magnitude(obj, constraints.object_bound)

        views = extract_views(obj, geometry)
        resid = probe * views - psi
        _, gamma = phebie_step_sizes(obj, probe, geometry)
        g_probe = np.einsum("kij,kij->ij", np.conj(views), resid)
        probe = probe - REAL_DTYPE(gamma) * g_probe
        if constraints.probe_bound is not None:
            probe = project_magnitude(probe, constraints.probe_bound)
        if counter is not None:
            counter.cmul(3 * resid.size)
            counter.cadd(2 * resid.size)

        # refresh the auxiliary waves against the measured magnitudes
        exit_hat = far_field(probe * views, counter)
        mag = np.abs(exit_hat)
        phase = np.where(mag > 0, exit_hat / np.maximum(mag, 1e-30), 1.0).astype(COMPLEX_DTYPE)
        psi = inverse_far_field(sqrt_y * phase, counter)
        if counter is not None:
            counter.cmul(2 * exit_hat.size)
            counter.real(2 * exit_hat.size)

        state = ModelState(obj, probe, True, True)
        f = objective_value(obj, probe, geometry, data, 0.0, MetricKind.GAUSSIAN, counter)
        _record(trace, t, f, 0, counter, monitor, state)
    return obj, probe, trace


# ---------------------------------------------------------------------------
# ADMM (augmented Lagrangian splitting on the far-field waves)


def multiplier_update(lam: np.ndarray, residual: np.ndarray, rho: float) -> np.ndarray:
    return lam + REAL_DTYPE(rho) * residual


def admm_run(
    init: ModelState,
    geometry: ScanGeometry,
    data: DiffractionStack,
    constraints: ConstraintSet,
    rho: float,
    kind: MetricKind,
    max_iters: int,
    monitor: Optional[Monitor] = None,
    counter: Optional[FlopCounter] = None,
    residual_log: Optional[list] = None,
) -> tuple[np.ndarray, np.ndarray, ConvergenceTrace]:
    """Closed-form probe/object updates, one Lipschitz-scaled gradient step on
    the far-field consensus variable, and the multiplier ascent."""
    if rho <= 0:
        raise ValueError("penalty parameter must be positive")
    obj = init.object.copy()
    probe = init.probe.copy()
    rho32 = REAL_DTYPE(rho)
    trace = ConvergenceTrace()

    views = extract_views(obj, geometry)
    psihat = far_field(probe * views, counter)  # consensus variable
    lam = np.zeros_like(psihat)
    eps_floor = 1e-8
    for t in range(max_iters):
        w = inverse_far_field(rho32 * psihat + lam, counter)
        if counter is not None:
            counter.cmul(psihat.size)
            counter.cadd(psihat.size)

        # probe update (object fixed at the previous iterate)
        views = extract_views(obj, geometry)
        num_p = np.einsum("kij,kij->ij", np.conj(views), w)
        den_p = rho * np.sum(np.abs(views) ** 2, axis=0)
        den_p = np.maximum(den_p, eps_floor * max(float(den_p.max()), 1e-30))
        probe = num_p / den_p
        if constraints.probe_bound is not None:
            probe = project_magnitude(probe.astype(COMPLEX_DTYPE), constraints.probe_bound)
        probe = probe.astype(COMPLEX_DTYPE)

        # object update (with the updated probe)
        num_o = scatter_views(np.conj(probe) * w, geometry)
        den_o = rho * coverage_map(probe, geometry)
        den_o = np.maximum(den_o, eps_floor * max(float(den_o.max()), 1e-30))
        obj = num_o / den_o
        if constraints.object_bound is not None:
            obj = project_magnitude(obj.astype(COMPLEX_DTYPE), constraints.object_bound)
        obj = obj.astype(COMPLEX_DTYPE)
        if counter is not None:
            counter.cmul(4 * views.size)
            counter.cadd(2 * views.size)
            counter.real(4 * views.size)

        # consensus update: one gradient step on the augmented Lagrangian
        views = extract_views(obj, geometry)
        consensus = far_field(probe * views, counter)
        if counter is not None:
            counter.cmul(views.size)
        h = (np.abs(psihat) ** 2 + data.background).astype(REAL_DTYPE)
        grad_data = 2.0 * metric_grad_intensity(h, data.patterns, kind, counter) * psihat
        hess_bound = (
            2.0 * np.abs(metric_grad_intensity(h, data.patterns, kind))
            + 4.0 * (h - data.background) * metric_hess_diag_intensity(h, data.patterns, kind)
        )
        lf = float(hess_bound.max())
        step = REAL_DTYPE(1.0 / (lf + rho))
        grad_lagrangian = grad_data + lam + rho32 * (psihat - consensus)
        psihat = psihat - step * grad_lagrangian
        if counter is not None:
            counter.cmul(2 * psihat.size)
            counter.cadd(3 * psihat.size)
            counter.real(6 * psihat.size)

        primal = psihat - consensus
        lam = multiplier_update(lam, primal, rho)
        if counter is not None:
            counter.cadd(2 * lam.size)
        if residual_log is not None:
            residual_log.append(float(np.linalg.norm(primal)))

        zeta = np.sqrt((np.abs(consensus) ** 2 + data.background).astype(REAL_DTYPE))
        f = metric_value(zeta, data.patterns, kind, counter)
        state = ModelState(obj, probe, True, True)
        _record(trace, t, f, 0, counter, monitor, state)
    return obj, probe, trace


def admm_rho_grid() -> list[float]:
    """Penalty sweep 10^x for x in {-2, -1.5, ..., 1}."""
    return [10.0**x for x in (-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0)]
