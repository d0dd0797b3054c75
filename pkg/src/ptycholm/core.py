"""Shared domain types and conversions between complex grids and stacked real coordinates.

Conventions used throughout the package:

* grids are 2-D row-major numpy arrays; reconstruction state is single
  precision (complex64 / float32),
* a scan offset is the (row, col) of the probe window's top-left corner,
* the real coordinate vector of a list of complex grids concatenates, per
  grid in order, the flattened real parts followed by the flattened
  imaginary parts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

COMPLEX_DTYPE = np.complex64
REAL_DTYPE = np.float32

Shape = tuple[int, int]


def as_complex_grid(values, shape: Shape | None = None) -> np.ndarray:
    """Coerce to a 2-D complex64 array, optionally checking the shape."""
    grid = np.asarray(values, dtype=COMPLEX_DTYPE)
    if grid.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {grid.shape}")
    if shape is not None and grid.shape != tuple(shape):
        raise ValueError(f"expected shape {shape}, got {grid.shape}")
    return grid


def as_real_grid(values, shape: Shape | None = None) -> np.ndarray:
    grid = np.asarray(values, dtype=REAL_DTYPE)
    if grid.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {grid.shape}")
    if shape is not None and grid.shape != tuple(shape):
        raise ValueError(f"expected shape {shape}, got {grid.shape}")
    return grid


@dataclass(frozen=True)
class ScanGeometry:
    """Object/probe shapes plus the K scan offsets defining the view windows."""

    object_shape: Shape
    probe_shape: Shape
    offsets: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "object_shape", tuple(int(s) for s in self.object_shape))
        object.__setattr__(self, "probe_shape", tuple(int(s) for s in self.probe_shape))
        object.__setattr__(
            self, "offsets", tuple((int(r), int(c)) for r, c in self.offsets)
        )
        nx, ny = self.object_shape
        mx, my = self.probe_shape
        if mx > nx or my > ny:
            raise ValueError("probe does not fit inside the object grid")
        if not self.offsets:
            raise ValueError("at least one scan position is required")
        for k, (r, c) in enumerate(self.offsets):
            if r < 0 or c < 0 or r + mx > nx or c + my > ny:
                raise ValueError(
                    f"offset {k} at ({r}, {c}) places the probe window outside "
                    f"the {nx}x{ny} object grid"
                )

    @property
    def num_positions(self) -> int:
        return len(self.offsets)

    @property
    def object_size(self) -> int:
        return self.object_shape[0] * self.object_shape[1]

    @property
    def probe_size(self) -> int:
        return self.probe_shape[0] * self.probe_shape[1]


@dataclass
class ModelState:
    """Current (object, probe) estimate plus run bookkeeping."""

    object: np.ndarray
    probe: np.ndarray
    optimize_object: bool = True
    optimize_probe: bool = False
    surrogate_offset: float = 0.0

    def __post_init__(self):
        self.object = as_complex_grid(self.object)
        self.probe = as_complex_grid(self.probe)
        self.surrogate_offset = float(self.surrogate_offset)
        if self.surrogate_offset < 0:
            raise ValueError("surrogate offset must be nonnegative")

    def copy(self) -> "ModelState":
        return ModelState(
            object=self.object.copy(),
            probe=self.probe.copy(),
            optimize_object=self.optimize_object,
            optimize_probe=self.optimize_probe,
            surrogate_offset=self.surrogate_offset,
        )


@dataclass(frozen=True)
class DiffractionStack:
    """Measured patterns, one detector-shaped grid per scan position."""

    patterns: np.ndarray  # (K, Mx, My) float32, nonnegative
    background: np.ndarray  # (Mx, My) float32, strictly positive

    def __post_init__(self):
        patterns = np.asarray(self.patterns, dtype=REAL_DTYPE)
        if patterns.ndim != 3:
            raise ValueError("patterns must be a (K, Mx, My) stack")
        background = as_real_grid(self.background, patterns.shape[1:])
        if np.any(patterns < 0):
            raise ValueError("measured patterns must be nonnegative")
        if np.any(background <= 0):
            raise ValueError("background must be strictly positive")
        object.__setattr__(self, "patterns", patterns)
        object.__setattr__(self, "background", background)

    @property
    def num_positions(self) -> int:
        return self.patterns.shape[0]


def to_rivector(grids: Sequence[np.ndarray]) -> np.ndarray:
    """Stack complex grids into one real vector, per grid [Re; Im]."""
    if len(grids) == 0:
        raise ValueError("need at least one grid")
    parts = []
    for grid in grids:
        grid = np.asarray(grid)
        parts.append(np.ascontiguousarray(grid.real, dtype=REAL_DTYPE).ravel())
        parts.append(np.ascontiguousarray(grid.imag, dtype=REAL_DTYPE).ravel())
    return np.concatenate(parts)


def from_rivector(vector: np.ndarray, shapes: Sequence[Shape]) -> list[np.ndarray]:
    """Exact inverse of :func:`to_rivector` for the given grid shapes."""
    vector = np.asarray(vector, dtype=REAL_DTYPE).ravel()
    total = 2 * sum(int(np.prod(s)) for s in shapes)
    if vector.size != total:
        raise ValueError(f"vector length {vector.size} does not match shapes (need {total})")
    grids = []
    start = 0
    for shape in shapes:
        n = int(np.prod(shape))
        re = vector[start : start + n]
        im = vector[start + n : start + 2 * n]
        grid = np.empty(shape, dtype=COMPLEX_DTYPE)
        grid.real = re.reshape(shape)
        grid.imag = im.reshape(shape)
        grids.append(grid)
        start += 2 * n
    return grids
