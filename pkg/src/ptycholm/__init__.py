"""Ptychographic phase retrieval with matrix-free projected Levenberg-Marquardt
solvers, analytic curvature diagonals, and first-order baselines."""

from .bookkeeping import ConvergenceTrace, CostModel, FlopCounter, TraceRow, flop_report
from .core import (
    COMPLEX_DTYPE,
    REAL_DTYPE,
    DiffractionStack,
    ModelState,
    ScanGeometry,
    from_rivector,
    to_rivector,
)
from .forward import (
    exit_wave,
    expected_intensity,
    expected_magnitude,
    extract_view,
    far_field,
    forward_magnitudes,
    scatter_adjoint,
    surrogate_schedule,
)
from .lm import (
    ConstraintSet,
    LMConfig,
    ScalingKind,
    SurrogateSchedule,
    lm_iteration,
    lm_lambda,
    lm_run_bpr_alternating,
    lm_run_bpr_joint,
    lm_run_spr,
    project_magnitude,
    projected_step,
)
from .matfree import GGNBasis, Linearization, VariableSelector, ggn_vec, gradient, jtvp, jvp
from .metrics import (
    MetricKind,
    metric_grad_intensity,
    metric_grad_magnitude,
    metric_hess_diag_intensity,
    metric_hess_diag_magnitude,
    metric_value,
)
from .pcg import LinearOperator, PCGResult, pcg_solve, truncation_eta
from .precond import joint_ggn_diag, object_ggn_diag, probe_ggn_diag

__version__ = "0.1.0"
