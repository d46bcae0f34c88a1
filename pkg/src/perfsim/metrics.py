"""Prediction-error metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import LengthMismatch, NonPositiveActual

GMAE_FLOOR = 1e-12


def _relative_errors(pred, actual) -> np.ndarray:
    pred = np.asarray(pred, dtype=float).ravel()
    actual = np.asarray(actual, dtype=float).ravel()
    if pred.shape != actual.shape or pred.size == 0:
        raise LengthMismatch(f"need equal non-empty lengths, got {pred.size} and {actual.size}")
    if np.any(actual <= 0):
        raise NonPositiveActual("actual values must be positive")
    return np.abs(pred - actual) / actual


def gmae(pred, actual) -> float:
    """Geometric mean of absolute relative errors, each floored at 1e-12."""
    rel = np.maximum(_relative_errors(pred, actual), GMAE_FLOOR)
    # a geometric mean lies within [min, max]; clip off exp/log rounding
    return float(np.clip(np.exp(np.mean(np.log(rel))), rel.min(), rel.max()))


def mape(pred, actual) -> float:
    """Arithmetic mean of absolute relative errors (a fraction, not a percentage)."""
    return float(np.mean(_relative_errors(pred, actual)))


@dataclass(frozen=True)
class MetricReport:
    gmae: float
    mape: float
    std: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def metric_report(pred, actual) -> MetricReport:
    rel = _relative_errors(pred, actual)
    return MetricReport(gmae(pred, actual), mape(pred, actual), float(np.std(rel)), int(rel.size))
