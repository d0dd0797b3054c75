"""Cost accounting and per-iteration convergence records shared by all solvers."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from io import StringIO
from typing import Iterable, Optional, Sequence

import numpy as np

TRACE_HEADER = ("iter", "f", "eps_O", "eps_P", "lambda", "cg_iters", "ls_iters", "flops")


@dataclass(frozen=True)
class CostModel:
    """Flop prices for the primitive events used in the cost accounting.

    Transcendental real operations (sqrt, log, exp) are priced as one real op.
    An FFT over n samples is priced at 5 * n * log2(n).
    """

    complex_multiply: int = 6
    complex_add: int = 2
    real_op: int = 1
    fft_factor: int = 5

    def fft(self, n_samples: int, batch: int = 1) -> int:
        if n_samples < 2:
            return 0
        return int(self.fft_factor * n_samples * math.log2(n_samples)) * batch

    def cost_of(self, event: str, count: int) -> int:
        """Price one event kind: 'fft' counts `count` samples of a single transform."""
        if event == "fft":
            return self.fft(count)
        if event == "cmul":
            return self.complex_multiply * count
        if event == "cadd":
            return self.complex_add * count
        if event == "real":
            return self.real_op * count
        raise ValueError(f"unknown cost event {event!r}")


DEFAULT_COST_MODEL = CostModel()


def flop_report(events: Iterable[tuple[str, int]], model: CostModel = DEFAULT_COST_MODEL) -> int:
    """Total flops for a sequence of (event, count) pairs under the cost model."""
    return sum(model.cost_of(kind, count) for kind, count in events)


class FlopCounter:
    """Mutable flop accumulator threaded through the operators.

    All charging methods are no-ops on a None counter, so hot paths guard with
    `if counter is not None`.
    """

    __slots__ = ("model", "total")

    def __init__(self, model: CostModel = DEFAULT_COST_MODEL):
        self.model = model
        self.total = 0

    def fft(self, n_samples: int, batch: int = 1) -> None:
        self.total += self.model.fft(n_samples, batch)

    def cmul(self, count: int) -> None:
        self.total += self.model.complex_multiply * count

    def cadd(self, count: int) -> None:
        self.total += self.model.complex_add * count

    def real(self, count: int) -> None:
        self.total += self.model.real_op * count

    def add(self, flops: int) -> None:
        self.total += int(flops)


@dataclass
class TraceRow:
    iteration: int
    f: float
    eps_object: Optional[float] = None
    eps_probe: Optional[float] = None
    lam: Optional[float] = None
    cg_iters: int = 0
    ls_iters: int = 0
    flops: int = 0


class ConvergenceTrace:
    """Ordered per-iteration diagnostics of one reconstruction run."""

    def __init__(self) -> None:
        self.rows: list[TraceRow] = []

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, row: TraceRow) -> None:
        if self.rows:
            last = self.rows[-1]
            if row.iteration <= last.iteration:
                raise ValueError("trace iterations must be strictly increasing")
            if row.flops < last.flops:
                raise ValueError("cumulative flops must be nondecreasing")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        """Column as float64 array; absent optional entries become NaN."""
        getters = {
            "iter": lambda r: r.iteration,
            "f": lambda r: r.f,
            "eps_O": lambda r: r.eps_object,
            "eps_P": lambda r: r.eps_probe,
            "lambda": lambda r: r.lam,
            "cg_iters": lambda r: r.cg_iters,
            "ls_iters": lambda r: r.ls_iters,
            "flops": lambda r: r.flops,
        }
        get = getters[name]
        return np.array([np.nan if get(r) is None else get(r) for r in self.rows], dtype=np.float64)

    def to_csv(self) -> str:
        buf = StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for r in self.rows:
            writer.writerow([
                r.iteration,
                repr(float(r.f)),
                "" if r.eps_object is None else repr(float(r.eps_object)),
                "" if r.eps_probe is None else repr(float(r.eps_probe)),
                "" if r.lam is None else repr(float(r.lam)),
                r.cg_iters,
                r.ls_iters,
                r.flops,
            ])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ConvergenceTrace":
        trace = cls()
        reader = csv.reader(StringIO(text))
        header = next(reader)
        if tuple(header) != TRACE_HEADER:
            raise ValueError(f"unexpected trace header {header!r}")
        for rec in reader:
            trace.append(TraceRow(
                iteration=int(rec[0]),
                f=float(rec[1]),
                eps_object=float(rec[2]) if rec[2] else None,
                eps_probe=float(rec[3]) if rec[3] else None,
                lam=float(rec[4]) if rec[4] else None,
                cg_iters=int(rec[5]),
                ls_iters=int(rec[6]),
                flops=int(rec[7]),
            ))
        return trace
