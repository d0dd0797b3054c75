"""Truncated, scaled, preconditioned, projected Levenberg-Marquardt solvers
for the standard (known probe) and blind (joint or alternating object/probe)
reconstruction problems.

Each outer iteration solves the damped curvature system

    (G + lambda D) step = -grad f

inexactly with preconditioned CG, forms the gain ratio between actual and
model-predicted reduction, and adapts the damping factor mu on the
0.75 / 0.25 / rho_min ladder; rejected steps re-solve with mu increased.
Constrained runs route every accepted step through a feasibility-preserving
projection/line-search plug-in, so all iterates stay inside the bounds.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .bookkeeping import ConvergenceTrace, FlopCounter, TraceRow
from .core import COMPLEX_DTYPE, REAL_DTYPE, DiffractionStack, ModelState, ScanGeometry
from .forward import forward_magnitudes, surrogate_schedule
from .matfree import GGNBasis, Linearization, VariableSelector, join_vector, split_vector
from .metrics import MetricKind, metric_value
from .pcg import LinearOperator, pcg_solve, truncation_eta
from .precond import floor_diag, scaling_diag

_PROJECT_SLACK = 1e-6


class ScalingKind(enum.Enum):
    IDENTITY = "identity"
    GGN_DIAG = "ggn-diag"


@dataclass(frozen=True)
class SurrogateSchedule:
    """Decaying intensity offset applied while minimizing the Poisson metric."""

    num_iterations: int = 100
    sigma0: float = 1.0

    def offset(self, t: int) -> float:
        return surrogate_schedule(t, self.num_iterations, self.sigma0)


def default_beta(kind: MetricKind) -> float:
    """CG truncation accuracy: tight for Gaussian, loose for Poisson."""
    return 0.1 if kind is MetricKind.GAUSSIAN else 0.9


@dataclass
class LMConfig:
    mu0: float = 1e-5
    mu_min: float = 1e-8
    kappa: float = 4.0
    nu: float = 1.0
    rho_min: float = 1e-4
    beta: float = 0.1
    sigma_armijo: float = 1e-4
    gamma_accept: float = 1e-6
    tau_s: float = 1e-8
    p_s: float = 2.1
    scaling: ScalingKind = ScalingKind.GGN_DIAG
    preconditioned: bool = True
    max_outer: int = 100
    cg_max_iters: int = 100
    max_rejections: int = 20
    max_halvings: int = 30
    surrogate: Optional[SurrogateSchedule] = None
    basis: GGNBasis = GGNBasis.MAGNITUDE

    def __post_init__(self):
        if not self.mu0 > self.mu_min > 0:
            raise ValueError("need mu0 > mu_min > 0")
        if self.kappa <= 1:
            raise ValueError("kappa must exceed 1")
        if not 1 <= self.nu <= 2:
            raise ValueError("nu must lie in [1, 2]")
        if not 0 < self.rho_min < 1:
            raise ValueError("rho_min must lie in (0, 1)")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        for name in ("sigma_armijo", "gamma_accept", "tau_s"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.p_s <= 1:
            raise ValueError("p_s must exceed 1")


@dataclass(frozen=True)
class ConstraintSet:
    """Optional magnitude bounds on object and probe (convex, separable)."""

    object_bound: Optional[float] = None
    probe_bound: Optional[float] = None

    def __post_init__(self):
        for bound in (self.object_bound, self.probe_bound):
            if bound is not None and bound <= 0:
                raise ValueError("magnitude bounds must be positive")

    def active_for(self, sel: VariableSelector) -> bool:
        if sel is VariableSelector.OBJECT:
            return self.object_bound is not None
        if sel is VariableSelector.PROBE:
            return self.probe_bound is not None
        return self.object_bound is not None or self.probe_bound is not None

    def project(self, obj: np.ndarray, probe: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.object_bound is not None:
            obj = project_magnitude(obj, self.object_bound)
        if self.probe_bound is not None:
            probe = project_magnitude(probe, self.probe_bound)
        return obj, probe


def project_magnitude(grid: np.ndarray, bound: float) -> np.ndarray:
    """Rescale entries with |z| > bound onto the bound, preserving phase.

    Entries within a relative slack of the bound are left untouched so the
    projection is bitwise idempotent in single precision.
    """
    if bound <= 0:
        raise ValueError("bound must be positive")
    mag = np.abs(grid)
    mask = mag > bound * (1.0 + _PROJECT_SLACK)
    if not np.any(mask):
        return grid
    out = grid.copy()
    out[mask] = grid[mask] * (REAL_DTYPE(bound) / mag[mask])
    return out


def lm_lambda(mu: float, grad_data_norm: float, nu: float, scaling: ScalingKind) -> float:
    """Damping factor: mu * ||data-space gradient||^nu under identity scaling,
    plain mu when the curvature diagonal supplies the scale."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    if scaling is ScalingKind.IDENTITY:
        return float(mu * grad_data_norm**nu)
    return float(mu)


@dataclass
class LMDiagnostics:
    f_before: float
    f_value: float
    lam: Optional[float]
    rho: Optional[float]
    mu_next: float
    grad_norm: float
    step_norm: float
    cg_iters: int = 0
    ls_iters: int = 0
    rejections: int = 0
    accepted: bool = False
    converged: bool = False
    stagnated: bool = False
    step: Optional[np.ndarray] = None


@dataclass
class ProjectedStepResult:
    f_value: float
    ls_iters: int
    success: bool
    branch: str


def _apply_step(
    obj: np.ndarray,
    probe: np.ndarray,
    step: np.ndarray,
    sel: VariableSelector,
    geometry: ScanGeometry,
    scale: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    d_obj, d_probe = split_vector(step if scale == 1.0 else REAL_DTYPE(scale) * step, sel, geometry)
    new_obj = obj + d_obj if d_obj is not None else obj
    new_probe = probe + d_probe if d_probe is not None else probe
    return new_obj, new_probe


def objective_value(
    obj: np.ndarray,
    probe: np.ndarray,
    geometry: ScanGeometry,
    data: DiffractionStack,
    sigma: float,
    kind: MetricKind,
    counter: Optional[FlopCounter],
) -> float:
    zeta = forward_magnitudes(
        ModelState(obj, probe), geometry, data.background, sigma, counter
    )
    return metric_value(zeta, data.patterns, kind, counter)


def _dot64(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False)))


def projected_step(
    state: ModelState,
    step: np.ndarray,
    grad: np.ndarray,
    config: LMConfig,
    constraints: ConstraintSet,
    sel: VariableSelector,
    kind: MetricKind,
    geometry: ScanGeometry,
    data: DiffractionStack,
    f_current: Optional[float] = None,
    counter: Optional[FlopCounter] = None,
) -> tuple[ModelState, ProjectedStepResult]:
    """Feasibility-preserving acceptance of an unconstrained update step.

    Tries, in order: the projected point when it slashes the objective; an
    Armijo backtracking search along the projected-step direction when it is
    a descent direction; otherwise a projected-gradient backtracking search.
    The returned state is always feasible. A failed search returns the
    current state with success=False.
    """
    sigma = state.surrogate_offset

    def value(o: np.ndarray, p: np.ndarray) -> float:
        return objective_value(o, p, geometry, data, sigma, kind, counter)

    def rebuild(o: np.ndarray, p: np.ndarray) -> ModelState:
        return ModelState(o, p, state.optimize_object, state.optimize_probe, sigma)

    if f_current is None:
        f_current = value(state.object, state.probe)

    trial_obj, trial_probe = _apply_step(state.object, state.probe, step, sel, geometry)
    proj_obj, proj_probe = constraints.project(trial_obj, trial_probe)
    f_proj = value(proj_obj, proj_probe)
    if f_proj < config.gamma_accept * f_current:
        return rebuild(proj_obj, proj_probe), ProjectedStepResult(f_proj, 0, True, "projected-descent")

    # search direction: projected step if it is a descent direction, else -grad
    d_obj = proj_obj - state.object if sel is not VariableSelector.PROBE else None
    d_probe = proj_probe - state.probe if sel is not VariableSelector.OBJECT else None
    s_vec = join_vector(d_obj, d_probe, sel)

    s_norm = math.sqrt(_dot64(s_vec, s_vec))
    gs = _dot64(grad, s_vec)
    if s_norm > 0 and gs <= -config.tau_s * s_norm**config.p_s:
        direction = s_vec
        branch = "projected-linesearch"
        first_candidate = (proj_obj, proj_probe, f_proj)  # alpha = 1 reuses the projected point
    else:
        direction = -grad
        branch = "gradient-linesearch"
        first_candidate = None

    dir_norm2 = _dot64(direction, direction)
    if dir_norm2 == 0.0:
        return rebuild(proj_obj, proj_probe), ProjectedStepResult(f_proj, 0, True, "null-step")

    alpha = 1.0
    ls_iters = 0
    for halving in range(config.max_halvings + 1):
        if halving == 0 and first_candidate is not None:
            cand_obj, cand_probe, f_cand = first_candidate
        else:
            cand_obj, cand_probe = _apply_step(
                state.object, state.probe, direction, sel, geometry, scale=alpha
            )
            cand_obj, cand_probe = constraints.project(cand_obj, cand_probe)
            f_cand = value(cand_obj, cand_probe)
            ls_iters += 1
        if f_cand <= f_current - config.sigma_armijo * alpha * dir_norm2:
            return rebuild(cand_obj, cand_probe), ProjectedStepResult(f_cand, ls_iters, True, branch)
        alpha *= 0.5
    return state, ProjectedStepResult(f_current, ls_iters, False, branch + "-stalled")


def lm_iteration(
    state: ModelState,
    geometry: ScanGeometry,
    data: DiffractionStack,
    config: LMConfig,
    constraints: Optional[ConstraintSet],
    sel: VariableSelector,
    kind: MetricKind,
    mu: Optional[float] = None,
    warm_start: Optional[np.ndarray] = None,
    counter: Optional[FlopCounter] = None,
) -> tuple[ModelState, LMDiagnostics]:
    """One outer LM iteration; returns the new state and diagnostics carrying
    the adapted damping factor and the accepted step (for warm starting)."""
    if mu is None:
        mu = config.mu0
    sigma = state.surrogate_offset
    lin = Linearization(state.object, state.probe, geometry, data.background, sigma, counter)
    f0 = metric_value(lin.zeta, data.patterns, kind, counter)
    if not math.isfinite(f0):
        raise FloatingPointError("objective diverged")

    resid_grad = lin.data_residual_grad(data, kind, config.basis)
    grad = lin.jtvp(resid_grad, sel, config.basis)
    grad_norm = math.sqrt(_dot64(grad, grad))
    if grad_norm <= 1e-30:
        return state, LMDiagnostics(
            f_before=f0, f_value=f0, lam=None, rho=None, mu_next=mu,
            grad_norm=grad_norm, step_norm=0.0, converged=True,
        )
    resid_grad_norm = math.sqrt(_dot64(resid_grad.ravel(), resid_grad.ravel()))

    if config.scaling is ScalingKind.GGN_DIAG:
        D = scaling_diag(state, geometry, data, sigma, kind, sel, counter, lin)
        curvature_diag = D
    else:
        D = np.ones(grad.size, dtype=REAL_DTYPE)
        curvature_diag = (
            scaling_diag(state, geometry, data, sigma, kind, sel, counter, lin)
            if config.preconditioned
            else None
        )

    neg_grad = -grad
    eta = truncation_eta(grad_norm, config.beta)
    cg_total = 0
    rejections = 0
    warm = warm_start
    lam = None
    rho = None
    while True:
        lam = lm_lambda(mu, resid_grad_norm, config.nu, config.scaling)
        lam32 = REAL_DTYPE(lam)
        if config.preconditioned:
            precond = floor_diag(curvature_diag + lam32 * D)
        else:
            precond = np.ones(grad.size, dtype=REAL_DTYPE)

        def apply(p: np.ndarray) -> np.ndarray:
            out = lin.ggn_vec(p, data, kind, sel, config.basis)
            out += lam32 * (D * p)
            if counter is not None:
                counter.real(3 * p.size)
            return out

        result = pcg_solve(
            LinearOperator(apply, grad.size), neg_grad, precond,
            x0=warm, eta=eta, max_iters=config.cg_max_iters, counter=counter,
        )
        cg_total += result.iterations
        step = result.x
        curv_step = neg_grad - result.residual - lam32 * (D * step)  # G @ step
        predicted = -(_dot64(grad, step) + 0.5 * _dot64(step, curv_step))
        if not math.isfinite(predicted) or predicted <= 0.0:
            if warm is not None and np.any(warm):
                warm = None  # poisoned warm start; re-solve from scratch
                continue
            return state, LMDiagnostics(
                f_before=f0, f_value=f0, lam=lam, rho=None, mu_next=mu,
                grad_norm=grad_norm, step_norm=0.0, cg_iters=cg_total,
                rejections=rejections, converged=True,
            )

        trial_obj, trial_probe = _apply_step(state.object, state.probe, step, sel, geometry)
        f_trial = objective_value(trial_obj, trial_probe, geometry, data, sigma, kind, counter)
        rho = (f0 - f_trial) / predicted if math.isfinite(f_trial) else -math.inf
        if rho > config.rho_min:
            break
        mu *= config.kappa
        rejections += 1
        warm = None
        if rejections > config.max_rejections:
            return state, LMDiagnostics(
                f_before=f0, f_value=f0, lam=lam, rho=rho, mu_next=mu,
                grad_norm=grad_norm, step_norm=0.0, cg_iters=cg_total,
                rejections=rejections, stagnated=True,
            )

    if rho > 0.75:
        mu_next = max(mu / config.kappa, config.mu_min)
    elif rho > 0.25:
        mu_next = mu
    else:
        mu_next = config.kappa * mu

    ls_iters = 0
    if constraints is not None and constraints.active_for(sel):
        new_state, ls = projected_step(
            state, step, grad, config, constraints, sel, kind, geometry, data,
            f_current=f0, counter=counter,
        )
        f_new = ls.f_value
        ls_iters = ls.ls_iters
        stagnated = not ls.success
    else:
        new_state = ModelState(
            trial_obj, trial_probe, state.optimize_object, state.optimize_probe, sigma
        )
        f_new = f_trial
        stagnated = False

    step_norm = math.sqrt(_dot64(step, step))
    return new_state, LMDiagnostics(
        f_before=f0, f_value=f_new, lam=lam, rho=rho, mu_next=mu_next,
        grad_norm=grad_norm, step_norm=step_norm, cg_iters=cg_total,
        ls_iters=ls_iters, rejections=rejections, accepted=True,
        stagnated=stagnated, step=step,
    )


Monitor = Callable[[int, ModelState], dict]


def _record(
    trace: ConvergenceTrace,
    t: int,
    f_value: float,
    diag_lam: Optional[float],
    cg_iters: int,
    ls_iters: int,
    counter: Optional[FlopCounter],
    monitor: Optional[Monitor],
    state: ModelState,
) -> None:
    extra = monitor(t, state) if monitor is not None else {}
    trace.append(TraceRow(
        iteration=t,
        f=f_value,
        eps_object=extra.get("eps_object"),
        eps_probe=extra.get("eps_probe"),
        lam=diag_lam,
        cg_iters=cg_iters,
        ls_iters=ls_iters,
        flops=counter.total if counter is not None else 0,
    ))


def _surrogate_offset(config: LMConfig, t: int) -> float:
    return config.surrogate.offset(t) if config.surrogate is not None else 0.0


def lm_run_spr(
    init_object: np.ndarray,
    probe: np.ndarray,
    geometry: ScanGeometry,
    data: DiffractionStack,
    config: LMConfig,
    kind: MetricKind,
    constraints: Optional[ConstraintSet] = None,
    monitor: Optional[Monitor] = None,
    counter: Optional[FlopCounter] = None,
) -> tuple[np.ndarray, ConvergenceTrace]:
    """Known-probe reconstruction: LM over the object only."""
    state = ModelState(init_object, probe, optimize_object=True, optimize_probe=False)
    trace = ConvergenceTrace()
    mu = config.mu0
    warm = None
    for t in range(config.max_outer):
        state.surrogate_offset = _surrogate_offset(config, t)
        state, diag = lm_iteration(
            state, geometry, data, config, constraints, VariableSelector.OBJECT, kind,
            mu=mu, warm_start=warm, counter=counter,
        )
        mu = diag.mu_next
        warm = diag.step if diag.accepted else None
        _record(trace, t, diag.f_value, diag.lam, diag.cg_iters, diag.ls_iters,
                counter, monitor, state)
        if diag.converged or diag.stagnated:
            break
    return state.object, trace


def lm_run_bpr_alternating(
    init: ModelState,
    geometry: ScanGeometry,
    data: DiffractionStack,
    config: LMConfig,
    constraints: ConstraintSet,
    kind: MetricKind,
    monitor: Optional[Monitor] = None,
    counter: Optional[FlopCounter] = None,
) -> tuple[np.ndarray, np.ndarray, ConvergenceTrace]:
    """Blind reconstruction alternating one object LM step and one probe LM
    step per outer iteration, each kept feasible."""
    state = ModelState(init.object.copy(), init.probe.copy(), True, True)
    trace = ConvergenceTrace()
    mu_obj = mu_probe = config.mu0
    warm_obj = warm_probe = None
    for t in range(config.max_outer):
        state.surrogate_offset = _surrogate_offset(config, t)
        state, diag_o = lm_iteration(
            state, geometry, data, config, constraints, VariableSelector.OBJECT, kind,
            mu=mu_obj, warm_start=warm_obj, counter=counter,
        )
        mu_obj = diag_o.mu_next
        warm_obj = diag_o.step if diag_o.accepted else None
        state, diag_p = lm_iteration(
            state, geometry, data, config, constraints, VariableSelector.PROBE, kind,
            mu=mu_probe, warm_start=warm_probe, counter=counter,
        )
        mu_probe = diag_p.mu_next
        warm_probe = diag_p.step if diag_p.accepted else None
        _record(trace, t, diag_p.f_value, diag_o.lam,
                diag_o.cg_iters + diag_p.cg_iters, diag_o.ls_iters + diag_p.ls_iters,
                counter, monitor, state)
        if (diag_o.converged or diag_o.stagnated) and (diag_p.converged or diag_p.stagnated):
            break
    return state.object, state.probe, trace


def lm_run_bpr_joint(
    init: ModelState,
    geometry: ScanGeometry,
    data: DiffractionStack,
    config: LMConfig,
    constraints: ConstraintSet,
    kind: MetricKind,
    monitor: Optional[Monitor] = None,
    counter: Optional[FlopCounter] = None,
) -> tuple[np.ndarray, np.ndarray, ConvergenceTrace]:
    """Blind reconstruction with a single LM on the stacked object+probe
    coordinates. Requires curvature-diagonal scaling and preconditioning: the
    joint system mixes object and probe scales and is too badly conditioned
    for plain CG."""
    if not (config.preconditioned and config.scaling is ScalingKind.GGN_DIAG):
        raise ValueError(
            "joint blind reconstruction requires preconditioned=True and "
            "scaling=GGN_DIAG; the unscaled joint system is too ill-conditioned"
        )
    state = ModelState(init.object.copy(), init.probe.copy(), True, True)
    trace = ConvergenceTrace()
    mu = config.mu0
    warm = None
    for t in range(config.max_outer):
        state.surrogate_offset = _surrogate_offset(config, t)
        state, diag = lm_iteration(
            state, geometry, data, config, constraints, VariableSelector.JOINT, kind,
            mu=mu, warm_start=warm, counter=counter,
        )
        mu = diag.mu_next
        warm = diag.step if diag.accepted else None
        _record(trace, t, diag.f_value, diag.lam, diag.cg_iters, diag.ls_iters,
                counter, monitor, state)
        if diag.converged or diag.stagnated:
            break
    return state.object, state.probe, trace
