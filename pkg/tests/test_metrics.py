import numpy as np
import pytest

from perfsim import metrics
from perfsim.errors import LengthMismatch, NonPositiveActual


def test_gmae_examples():
    assert metrics.gmae([101, 104], [100, 100]) == pytest.approx(0.02)
    assert metrics.gmae([110], [100]) == pytest.approx(0.10)
    assert metrics.gmae([3.0, 4.0], [3.0, 4.0]) <= 1e-12


def test_mape_examples():
    assert metrics.mape([101, 104], [100, 100]) == pytest.approx(0.025)
    assert metrics.mape([1.0, 2.0], [1.0, 2.0]) == 0
    assert metrics.mape([90], [100]) == pytest.approx(0.10)


def test_errors():
    with pytest.raises(LengthMismatch):
        metrics.gmae([1, 2], [1])
    with pytest.raises(LengthMismatch):
        metrics.mape([], [])
    with pytest.raises(NonPositiveActual):
        metrics.gmae([1], [0])


def test_report():
    r = metrics.metric_report([101, 104], [100, 100])
    assert r.n == 2
    assert r.std == pytest.approx(0.015)
    assert set(r.to_dict()) == {"gmae", "mape", "std", "n"}


def test_gmae_le_mape_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 50))
        actual = rng.uniform(0.1, 100, n)
        pred = actual * rng.uniform(0.2, 3.0, n)
        assert metrics.gmae(pred, actual) <= metrics.mape(pred, actual) + 1e-15
