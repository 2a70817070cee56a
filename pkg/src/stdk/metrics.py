"""Point and interval scores: MSPE, PICP, MPIW.

Pairs with a missing observation or prediction are dropped before scoring
(pairwise deletion); ``EvalReport.n`` says how many were kept. Coverage
uses the closed interval, so an observation on a bound counts as covered.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyEvaluationError, InvalidIntervalError, ShapeError


@dataclass(frozen=True)
class EvalReport:
    n: int
    mspe: float
    picp: float
    mpiw: float

    def to_csv(self) -> str:
        return f"n,mspe,picp,mpiw\n{self.n},{self.mspe!r},{self.picp!r},{self.mpiw!r}\n"

    def to_text(self) -> str:
        return (
            f"scored pairs : {self.n}\n"
            f"MSPE         : {self.mspe:.6f}\n"
            f"PICP         : {self.picp:.6f}\n"
            f"MPIW         : {self.mpiw:.6f}\n"
        )


def _columns(*arrays):
    cols = [np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays]
    if len({c.size for c in cols}) != 1:
        raise ShapeError(f"length mismatch: {[c.size for c in cols]}")
    keep = np.ones(cols[0].size, dtype=bool)
    for c in cols:
        keep &= ~np.isnan(c)
    if not keep.any():
        raise EmptyEvaluationError("no scored pairs after dropping missing values")
    return [c[keep] for c in cols]


def _check_intervals(lower, upper):
    if np.any(lower > upper):
        bad = int(np.argmax(lower > upper))
        raise InvalidIntervalError(f"crossing interval at scored pair {bad}: lower {lower[bad]} > upper {upper[bad]}")


def mspe(y, median_pred) -> float:
    y, pred = _columns(y, median_pred)
    return float(np.mean((y - pred) ** 2))


def picp(y, lower, upper) -> float:
    y, lower, upper = _columns(y, lower, upper)
    _check_intervals(lower, upper)
    return float(np.mean((lower <= y) & (y <= upper)))


def mpiw(lower, upper) -> float:
    lower, upper = _columns(lower, upper)
    _check_intervals(lower, upper)
    return float(np.mean(upper - lower))


def evaluate(y, lower, median, upper) -> EvalReport:
    """Score all three metrics on the pairs where every input is present."""
    y, lower, median, upper = _columns(y, lower, median, upper)
    _check_intervals(lower, upper)
    return EvalReport(
        n=int(y.size),
        mspe=float(np.mean((y - median) ** 2)),
        picp=float(np.mean((lower <= y) & (y <= upper))),
        mpiw=float(np.mean(upper - lower)),
    )
