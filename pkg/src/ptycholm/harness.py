"""Experiment generation and evaluation: probe/object synthesis, Poisson
dataset simulation, registered reconstruction errors, sliding-window
convergence detection, and the algorithm dispatch used by the CLI and the
benchmark sweeps.

The default protocol is a 224x224 object box (structured 160x160 interior
inside a constant 1.0 bright-field frame), a 64x64 probe rastered in 5-pixel
steps (1024 positions), constant background 1e-8, and probe photon budgets
of 1e3 / 1e4 / 1e6.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.ndimage
from numpy.lib.stride_tricks import sliding_window_view
from skimage.registration import phase_cross_correlation

from .baselines import admm_rho_grid, admm_run, epie_run, nag_run, ncg_run, phebie_run
from .bookkeeping import (
    DEFAULT_COST_MODEL,
    ConvergenceTrace,
    CostModel,
    FlopCounter,
    flop_report,
)
from .core import COMPLEX_DTYPE, REAL_DTYPE, DiffractionStack, ModelState, ScanGeometry
from .forward import far_field, forward_magnitudes, inverse_far_field
from .lm import (
    ConstraintSet,
    LMConfig,
    Monitor,
    ScalingKind,
    SurrogateSchedule,
    default_beta,
    lm_run_bpr_alternating,
    lm_run_bpr_joint,
    lm_run_spr,
)
from .matfree import GGNBasis
from .metrics import MetricKind

DEFAULT_BOX_SHAPE = (224, 224)
DEFAULT_INNER_SHAPE = (160, 160)
DEFAULT_PROBE_SHAPE = (64, 64)
DEFAULT_STEP = 5
DEFAULT_BACKGROUND = 1e-8
PHOTON_TIERS = {"low": 1e3, "moderate": 1e4, "high": 1e6}
DEFAULT_CONSTRAINTS = ConstraintSet(object_bound=1.0, probe_bound=1e8)
DEFAULT_NUM_SEEDS = 5

ALGORITHMS = ("lm", "plm", "lm-a", "plm-a", "plm-j", "epie", "ncg", "pncg", "nag", "phebie", "admm")
SPR_ALGORITHMS = ("lm", "plm", "ncg", "pncg", "nag")
BPR_ALGORITHMS = ("lm-a", "plm-a", "plm-j", "epie", "phebie", "admm")
GAUSSIAN_ONLY = ("nag", "epie", "phebie")
LM_FAMILY = ("lm", "plm", "lm-a", "plm-a", "plm-j")
METRIC_NAMES = ("gaussian", "poisson", "poisson-surrogate")


def raster_geometry(
    object_shape=DEFAULT_BOX_SHAPE,
    probe_shape=DEFAULT_PROBE_SHAPE,
    step: int = DEFAULT_STEP,
) -> ScanGeometry:
    """Square raster of probe offsets in fixed pixel steps from the origin."""
    if step < 1:
        raise ValueError("step must be at least one pixel")
    counts = [max((object_shape[i] - probe_shape[i]) // step, 1) for i in (0, 1)]
    offsets = [(i * step, j * step) for i in range(counts[0]) for j in range(counts[1])]
    return ScanGeometry(object_shape, probe_shape, offsets)


def _radius_grid(shape) -> np.ndarray:
    rows = np.arange(shape[0]) - shape[0] / 2.0
    cols = np.arange(shape[1]) - shape[1] / 2.0
    return np.sqrt(rows[:, None] ** 2 + cols[None, :] ** 2)


def make_probe(
    shape=DEFAULT_PROBE_SHAPE,
    aperture_radius: float = 8.0,
    defocus: float = 2.0,
    total_photons: float = 1e6,
) -> np.ndarray:
    """Defocused Airy beam: circular pupil, inverse DFT, quadratic phase,
    rescaled so the integrated intensity equals the photon budget."""
    if total_photons <= 0:
        raise ValueError("photon budget must be positive")
    if aperture_radius >= min(shape) / 2:
        raise ValueError("aperture radius larger than the frequency grid")
    fr = np.fft.fftfreq(shape[0]) * shape[0]
    fc = np.fft.fftfreq(shape[1]) * shape[1]
    pupil = (fr[:, None] ** 2 + fc[None, :] ** 2) <= aperture_radius**2
    field = np.fft.fftshift(np.fft.ifft2(pupil.astype(np.complex128)))
    rho2 = (_radius_grid(shape) / (min(shape) / 2.0)) ** 2
    probe = field * np.exp(1j * defocus * rho2)
    probe *= math.sqrt(total_photons / float(np.sum(np.abs(probe) ** 2)))
    return probe.astype(COMPLEX_DTYPE)


def airy_lobe_radius(shape, aperture_radius: float) -> float:
    """First zero of the pupil's far-field pattern, in real-space pixels."""
    return 3.8317 * min(shape) / (2.0 * math.pi * aperture_radius)


def make_initial_probe(
    shape=DEFAULT_PROBE_SHAPE,
    aperture_radius: float = 8.0,
    total_photons: float = 1e6,
) -> np.ndarray:
    """Phaseless disk matching the Airy central lobe, photon budget matched."""
    disk = _radius_grid(shape) <= airy_lobe_radius(shape, aperture_radius)
    if not disk.any():
        raise ValueError("aperture radius leaves an empty central lobe")
    probe = disk.astype(np.float64)
    probe *= math.sqrt(total_photons / float(probe.sum()))
    return probe.astype(COMPLEX_DTYPE)


def _smooth_field(rng: np.random.Generator, shape, correlation: float) -> np.ndarray:
    """Gaussian-correlated random field rescaled to [0, 1]."""
    noise = rng.standard_normal(shape)
    fr = np.fft.fftfreq(shape[0])[:, None]
    fc = np.fft.fftfreq(shape[1])[None, :]
    envelope = np.exp(-((fr**2 + fc**2) * (correlation**2) * 2.0 * math.pi**2))
    field = np.real(np.fft.ifft2(np.fft.fft2(noise) * envelope))
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-12:
        return np.zeros(shape)
    return (field - lo) / (hi - lo)


def make_object(
    inner_shape=DEFAULT_INNER_SHAPE,
    box_shape=DEFAULT_BOX_SHAPE,
    seed: int = 7,
) -> np.ndarray:
    """Structured complex object (magnitude in [0, 1], phase in [-pi, pi))
    centered inside a constant 1.0 bright-field frame."""
    if inner_shape[0] > box_shape[0] or inner_shape[1] > box_shape[1]:
        raise ValueError("inner region does not fit inside the box")
    rng = np.random.default_rng(seed)
    mag = 0.30 + 0.65 * _smooth_field(rng, inner_shape, 9.0)
    phase = (2.0 * _smooth_field(rng, inner_shape, 13.0) - 1.0) * 0.9 * math.pi
    rr = np.arange(inner_shape[0])[:, None]
    cc = np.arange(inner_shape[1])[None, :]
    for _ in range(10):  # sharp-edged inclusions on top of the smooth texture
        cy, cx = rng.uniform(0.15, 0.85, 2) * np.array(inner_shape)
        radius = rng.uniform(0.03, 0.10) * min(inner_shape)
        disk = (rr - cy) ** 2 + (cc - cx) ** 2 <= radius**2
        mag[disk] *= rng.uniform(0.45, 0.95)
        phase[disk] += rng.uniform(-0.6, 0.6)
    np.clip(mag, 0.0, 1.0, out=mag)
    phase = np.mod(phase + math.pi, 2.0 * math.pi) - math.pi
    inner = mag * np.exp(1j * phase)
    box = np.ones(box_shape, dtype=COMPLEX_DTYPE)
    r0 = (box_shape[0] - inner_shape[0]) // 2
    c0 = (box_shape[1] - inner_shape[1]) // 2
    box[r0 : r0 + inner_shape[0], c0 : c0 + inner_shape[1]] = inner.astype(COMPLEX_DTYPE)
    return box


def random_object_init(
    box_shape=DEFAULT_BOX_SHAPE,
    inner_shape=DEFAULT_INNER_SHAPE,
    seed: int = 0,
) -> np.ndarray:
    """Uniform random complex start (|value| <= 1) inside the interior, with
    the known bright-field frame kept at exactly 1.0."""
    rng = np.random.default_rng(seed)
    box = np.ones(box_shape, dtype=COMPLEX_DTYPE)
    mag = rng.uniform(0.0, 1.0, inner_shape)
    phase = rng.uniform(-math.pi, math.pi, inner_shape)
    r0 = (box_shape[0] - inner_shape[0]) // 2
    c0 = (box_shape[1] - inner_shape[1]) // 2
    box[r0 : r0 + inner_shape[0], c0 : c0 + inner_shape[1]] = (
        mag * np.exp(1j * phase)
    ).astype(COMPLEX_DTYPE)
    return box


def simulate_dataset(
    obj: np.ndarray,
    probe: np.ndarray,
    geometry: ScanGeometry,
    background: float = DEFAULT_BACKGROUND,
    seed: int = 0,
) -> DiffractionStack:
    """Poisson-sampled diffraction patterns of the noise-free intensities."""
    if background <= 0:
        raise ValueError("background must be strictly positive")
    bg_grid = np.full(geometry.probe_shape, background, dtype=REAL_DTYPE)
    zeta = forward_magnitudes(ModelState(obj, probe), geometry, bg_grid)
    h = zeta.astype(np.float64) ** 2
    rng = np.random.default_rng(seed)
    patterns = rng.poisson(h).astype(REAL_DTYPE)
    return DiffractionStack(patterns=patterns, background=bg_grid)


def fluence_summary(probe: np.ndarray, geometry: ScanGeometry) -> dict:
    photons = float(np.sum(np.abs(probe) ** 2))
    total = photons * geometry.num_positions
    return {
        "probe_photons": photons,
        "num_positions": geometry.num_positions,
        "total_photons": total,
        "photons_per_object_pixel": total / geometry.object_size,
    }


# ---------------------------------------------------------------------------
# Evaluation


def register_error(recon: np.ndarray, truth: np.ndarray, upsample: int = 100) -> float:
    """Normalized reconstruction error after removing the global phase and the
    subpixel translation (upsampled cross-correlation registration)."""
    if recon.shape != truth.shape:
        raise ValueError("shapes must match")
    truth_norm = float(np.linalg.norm(truth))
    if truth_norm == 0.0:
        raise ValueError("truth is identically zero")
    shift, _, _ = phase_cross_correlation(
        truth.astype(np.complex128),
        recon.astype(np.complex128),
        upsample_factor=upsample,
        normalization=None,
    )
    if np.any(shift):
        spectrum = scipy.ndimage.fourier_shift(np.fft.fft2(recon.astype(np.complex128)), shift)
        aligned = np.fft.ifft2(spectrum)
    else:
        aligned = recon.astype(np.complex128)
    overlap = np.vdot(aligned, truth)
    if abs(overlap) > 0:
        aligned = aligned * (overlap / abs(overlap))
    return float(np.linalg.norm(aligned - truth) / truth_norm)


def make_error_monitor(
    truth_object: np.ndarray,
    truth_probe: Optional[np.ndarray] = None,
    upsample: int = 100,
) -> Monitor:
    def monitor(t: int, state: ModelState) -> dict:
        out = {"eps_object": register_error(state.object, truth_object, upsample)}
        if truth_probe is not None:
            out["eps_probe"] = register_error(state.probe, truth_probe, upsample)
        return out

    return monitor


def window_rmsd(series: Sequence[float], window: int) -> np.ndarray:
    """Sample standard deviation about the mean over each sliding window."""
    if window < 2:
        raise ValueError("window must span at least two samples")
    series = np.asarray(series, dtype=np.float64)
    if series.size < window:
        raise ValueError("series shorter than the window")
    views = sliding_window_view(series, window)
    return views.std(axis=-1, ddof=1)


def converged_at(series: Sequence[float], window: int, eps_c: float) -> Optional[int]:
    """First window index that is both flat (RMSD <= eps_c) and sits at the
    global minimum of the window means; None when no window qualifies."""
    series = np.asarray(series, dtype=np.float64)
    views = sliding_window_view(series, window)
    means = views.mean(axis=-1)
    rmsd = views.std(axis=-1, ddof=1)
    qualifying = (rmsd <= eps_c) & (means == means.min())
    if not qualifying.any():
        return None
    return int(np.argmax(qualifying))


def padded_series(values: np.ndarray, length: int) -> np.ndarray:
    """Extend a (possibly early-stopped) series by holding its final value."""
    values = np.asarray(values, dtype=np.float64)
    if values.size >= length:
        return values[:length]
    if values.size == 0:
        raise ValueError("cannot pad an empty series")
    pad = np.full(length - values.size, values[-1])
    return np.concatenate([values, pad])


def mean_series(traces: Sequence[ConvergenceTrace], column: str, length: int) -> np.ndarray:
    """Across-run mean of a trace column, runs padded to a common length."""
    stacked = np.stack([padded_series(t.column(column), length) for t in traces])
    return stacked.mean(axis=0)


# ---------------------------------------------------------------------------
# Algorithm dispatch


@dataclass
class RunResult:
    object: np.ndarray
    probe: Optional[np.ndarray]
    trace: ConvergenceTrace


def validate_run_choice(algorithm: str, metric: str, problem: str) -> None:
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if metric not in METRIC_NAMES:
        raise ValueError(f"unknown metric {metric!r}")
    if problem not in ("spr", "bpr"):
        raise ValueError(f"unknown problem {problem!r}")
    if problem == "spr" and algorithm not in SPR_ALGORITHMS:
        raise ValueError(f"{algorithm} solves the blind problem; use problem=bpr")
    if problem == "bpr" and algorithm not in BPR_ALGORITHMS:
        raise ValueError(f"{algorithm} solves the known-probe problem; use problem=spr")
    if metric != "gaussian" and algorithm in GAUSSIAN_ONLY:
        raise ValueError(f"{algorithm} is defined for the gaussian metric only")
    if metric == "poisson-surrogate" and algorithm not in LM_FAMILY:
        raise ValueError("the surrogate schedule applies to the LM family only")


def metric_kind(metric: str) -> MetricKind:
    return MetricKind.GAUSSIAN if metric == "gaussian" else MetricKind.POISSON


def build_lm_config(algorithm: str, metric: str, max_iters: int, options: Optional[dict] = None) -> LMConfig:
    options = dict(options or {})
    kind = metric_kind(metric)
    preconditioned = algorithm.startswith("p")
    config = LMConfig(
        scaling=ScalingKind.GGN_DIAG if preconditioned else ScalingKind.IDENTITY,
        preconditioned=preconditioned,
        beta=options.pop("beta", default_beta(kind)),
        max_outer=max_iters,
        surrogate=SurrogateSchedule(
            options.pop("surrogate_iterations", 100),
            options.pop("surrogate_sigma0", 1.0),
        )
        if metric == "poisson-surrogate"
        else None,
        basis=GGNBasis(options.pop("ggn_basis", "magnitude")),
    )
    for key, value in options.items():
        if not hasattr(config, key):
            raise ValueError(f"unknown solver option {key!r}")
        config = _replace_config(config, key, value)
    return config


def _replace_config(config: LMConfig, key: str, value) -> LMConfig:
    from dataclasses import replace

    if key == "scaling":
        value = ScalingKind(value)
    return replace(config, **{key: value})


def run_reconstruction(
    algorithm: str,
    metric: str,
    problem: str,
    dataset: DiffractionStack,
    geometry: ScanGeometry,
    init_object: np.ndarray,
    init_probe: np.ndarray,
    max_iters: int,
    seed: int = 0,
    constraints: Optional[ConstraintSet] = None,
    options: Optional[dict] = None,
    monitor: Optional[Monitor] = None,
    counter: Optional[FlopCounter] = None,
) -> RunResult:
    """Run one reconstruction; init_probe is the known probe for SPR runs and
    the starting probe guess for BPR runs."""
    validate_run_choice(algorithm, metric, problem)
    options = dict(options or {})
    kind = metric_kind(metric)
    if constraints is None and problem == "bpr":
        constraints = DEFAULT_CONSTRAINTS

    if algorithm in ("lm", "plm"):
        config = build_lm_config(algorithm, metric, max_iters, options)
        obj, trace = lm_run_spr(
            init_object, init_probe, geometry, dataset, config, kind,
            monitor=monitor, counter=counter,
        )
        return RunResult(obj, None, trace)
    if algorithm in ("lm-a", "plm-a", "plm-j"):
        config = build_lm_config(algorithm, metric, max_iters, options)
        init = ModelState(init_object, init_probe, True, True)
        runner = lm_run_bpr_joint if algorithm == "plm-j" else lm_run_bpr_alternating
        obj, probe, trace = runner(
            init, geometry, dataset, config, constraints, kind,
            monitor=monitor, counter=counter,
        )
        return RunResult(obj, probe, trace)
    if algorithm == "epie":
        init = ModelState(init_object, init_probe, True, True)
        obj, probe, trace = epie_run(
            init, geometry, dataset, seed, max_iters, monitor=monitor, counter=counter
        )
        return RunResult(obj, probe, trace)
    if algorithm in ("ncg", "pncg"):
        init = ModelState(init_object, init_probe)
        obj, trace = ncg_run(
            init, geometry, dataset, kind, algorithm == "pncg", max_iters,
            basis=GGNBasis(options.pop("ggn_basis", "magnitude")),
            monitor=monitor, counter=counter,
        )
        return RunResult(obj, None, trace)
    if algorithm == "nag":
        init = ModelState(init_object, init_probe)
        obj, trace = nag_run(init, geometry, dataset, max_iters, monitor=monitor, counter=counter)
        return RunResult(obj, None, trace)
    if algorithm == "phebie":
        init = ModelState(init_object, init_probe, True, True)
        obj, probe, trace = phebie_run(
            init, geometry, dataset, constraints, max_iters, monitor=monitor, counter=counter
        )
        return RunResult(obj, probe, trace)
    # admm
    init = ModelState(init_object, init_probe, True, True)
    obj, probe, trace = admm_run(
        init, geometry, dataset, constraints, options.pop("admm_rho", 1.0), kind,
        max_iters, monitor=monitor, counter=counter,
    )
    return RunResult(obj, probe, trace)
