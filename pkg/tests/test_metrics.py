import numpy as np
import pytest

from stdk import metrics
from stdk.errors import EmptyEvaluationError, InvalidIntervalError, ShapeError

Y = [1, 1, 3, 5.5]
LOWER = [0, 0, 0, 5]
UPPER = [2, 2, 2, 6]


def test_picp_example():
    assert metrics.picp(Y, LOWER, UPPER) == 0.75


def test_mspe_example():
    assert metrics.mspe([1, 2], [1, 3]) == 0.5


def test_mpiw_example():
    assert metrics.mpiw([0, 1], [2, 4]) == 2.5


def test_wide_intervals_cover_everything():
    y = np.random.default_rng(0).normal(size=100)
    assert metrics.picp(y, np.full(100, -1e300), np.full(100, 1e300)) == 1.0


def test_boundary_is_covered():
    assert metrics.picp([2.0, 0.0], [0.0, 0.0], [2.0, 1.0]) == 1.0


def test_degenerate_width():
    assert metrics.mpiw([1.0, 2.0], [1.0, 2.0]) == 0.0


def test_perfect_prediction():
    y = np.random.default_rng(1).normal(size=20)
    assert metrics.mspe(y, y) == 0.0


def test_pairwise_deletion():
    report = metrics.evaluate([1.0, np.nan, 3.0], [0.0, 0.0, np.nan], [1.0, 1.0, 3.0], [2.0, 2.0, 4.0])
    assert report.n == 1
    assert (report.mspe, report.picp, report.mpiw) == (0.0, 1.0, 2.0)


def test_errors():
    with pytest.raises(InvalidIntervalError):
        metrics.picp([0.0], [1.0], [0.0])
    with pytest.raises(EmptyEvaluationError):
        metrics.mspe([np.nan], [1.0])
    with pytest.raises(ShapeError):
        metrics.mspe([1.0, 2.0], [1.0])


def test_csv():
    report = metrics.EvalReport(4, 0.5, 0.75, 2.5)
    assert report.to_csv() == "n,mspe,picp,mpiw\n4,0.5,0.75,2.5\n"


def random_case(rng):
    n = int(rng.integers(1, 50))
    y = rng.normal(size=n)
    mid = y + rng.normal(size=n)
    return y, mid - rng.exponential(size=n), mid, mid + rng.exponential(size=n)


def test_affine_invariance_and_scaling():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        y, lower, median, upper = random_case(rng)
        # dyadic scales and quarter shifts keep the rescaled comparisons exact
        a = 2.0 ** int(rng.integers(-4, 5))
        b = float(rng.integers(-8, 9)) / 4
        assert metrics.picp(a * y + b, a * lower + b, a * upper + b) == metrics.picp(y, lower, upper)
        assert metrics.mpiw(a * lower, a * upper) == pytest.approx(a * metrics.mpiw(lower, upper), rel=1e-12)
        assert metrics.mspe(y, median) >= 0.0
