"""Log-log fits of performance against parameter count.

Every metric kind is mapped through ``-log(value)`` so that a positive slope
always means "bigger model, better score": the aFD sum shrinks, and so do
``1 - Dice`` and ``1 - meanIoU``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import InputError

# Slopes reported for the synthetic-data students and for real-data training.
PUBLISHED_SLOPES = {
    "synthetic": {"afd_vs_human": 0.15, "afd_vs_echoclip": 0.086, "dice": 0.16, "meaniou": 0.11},
    "real": {"afd_vs_human": 0.124, "afd_vs_echoclip": 0.07, "meaniou": 0.067, "dice": 0.088},
}


class MetricKind(str, enum.Enum):
    AFD_SUM = "AFD_SUM"
    ONE_MINUS_DICE = "ONE_MINUS_DICE"
    ONE_MINUS_IOU = "ONE_MINUS_IOU"


@dataclass(frozen=True)
class ScalingPoint:
    param_count: int
    metric_value: float
    metric_kind: MetricKind = MetricKind.AFD_SUM

    def __post_init__(self):
        object.__setattr__(self, "metric_kind", MetricKind(self.metric_kind))
        if self.param_count <= 0:
            raise InputError(f"param_count must be positive, got {self.param_count}")

    def transformed(self):
        if self.metric_value <= 0:
            raise InputError(f"point {self.param_count}: metric value {self.metric_value} must be positive for the log")
        if self.metric_kind is not MetricKind.AFD_SUM and self.metric_value > 1:
            raise InputError(f"point {self.param_count}: {self.metric_kind.value} must lie in (0, 1]")
        return -np.log(self.metric_value)


@dataclass(frozen=True)
class LogLogFit:
    slope: float
    intercept: float
    r_squared: float

    @property
    def log_metric_slope(self):
        """Slope of ``log(1 - metric)`` style plots, i.e. without the leading minus."""
        return -self.slope


def _xy(points):
    x = np.array([np.log(p.param_count) for p in points], dtype=float)
    y = np.array([p.transformed() for p in points], dtype=float)
    return x, y


def fit_loglog(points):
    """Ordinary least squares of ``-log(metric)`` on ``log(param_count)``."""
    points = list(points)
    if len({p.param_count for p in points}) < 2:
        raise InputError("need at least two distinct parameter counts")
    x, y = _xy(points)
    xc, yc = x - x.mean(), y - y.mean()
    slope = float(np.dot(xc, yc) / np.dot(xc, xc))
    intercept = float(y.mean() - slope * x.mean())
    ss_tot = float(np.dot(yc, yc))
    ss_res = float(np.sum((y - intercept - slope * x) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return LogLogFit(slope, intercept, r2)


def _hinge_residual(x, y, knee_x):
    """Residual of the best ``y = a + s * min(x, knee_x)`` fit."""
    z = np.minimum(x, knee_x)
    A = np.column_stack([np.ones_like(z), z])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(np.sum((y - A @ coef) ** 2))


@dataclass(frozen=True)
class SaturationSplit:
    knee: int
    linear_region: tuple
    plateau_region: tuple
    residual: float


def saturation_split(points, knee_candidates=None, tol=1e-9):
    """Split points into a log-linear part and a plateau.

    The plateau is a constant joined to the line at the knee, so the fit is
    ``a + s * min(log N, log knee)``. The knee with the smallest residual
    wins; ties go to the smaller knee.
    """
    points = sorted(points, key=lambda p: p.param_count)
    if len(points) < 4:
        raise InputError(f"need at least 4 points, got {len(points)}")
    x, y = _xy(points)
    candidates = sorted(set(knee_candidates or (p.param_count for p in points)))
    scale = 1.0 + float(np.dot(y - y.mean(), y - y.mean()))
    best = None
    for knee in candidates:
        res = _hinge_residual(x, y, np.log(knee))
        if best is None or res < best[1] - tol * scale:
            best = (knee, res)
    knee, res = best
    linear = tuple(p for p in points if p.param_count <= knee)
    plateau = tuple(p for p in points if p.param_count > knee)
    return SaturationSplit(int(knee), linear, plateau, res)


def transformed_rows(points):
    """Plot-ready rows ``(param_count, kind, value, log_n, neg_log_value)``."""
    return [
        [p.param_count, p.metric_kind.value, float(p.metric_value), float(np.log(p.param_count)), float(p.transformed())]
        for p in points
    ]
