"""Calibration assessment (curves, slope/intercept, ICI family) and positive
likelihood-ratio analysis over classification thresholds."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit
from scipy.special import expit, logit

from .evaluation import ConfusionMatrix, confusion

CLAMP = 1e-6


class ConvergenceError(RuntimeError):
    pass


def _check(y, p):
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 1:
        raise ValueError(f"y and p must be 1-D of equal length, got {y.shape} and {p.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("y must be binary 0/1")
    return y, p


# ---------------------------------------------------------------------------
# Calibration curve
# ---------------------------------------------------------------------------

def calibration_curve(y, p, n_bins: int = 10) -> list[tuple[float, float, int]]:
    """Equal-count bins over sorted predictions: ``(mean p, observed rate, count)``.

    Bin edges never split a run of tied predictions; an edge inside a run
    moves back to the start of the run, so bins can merge but never empty.
    """
    y, p = _check(y, p)
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    n = len(p)
    if n < n_bins:
        raise ValueError(f"{n} rows cannot fill {n_bins} bins")
    order = np.argsort(p, kind="stable")
    sp, sy = p[order], y[order]
    edges = [len(chunk) for chunk in np.array_split(np.arange(n), n_bins)]
    bounds = np.cumsum(edges)[:-1]
    bounds = np.searchsorted(sp, sp[bounds], side="left")
    bounds = np.unique(bounds[(bounds > 0) & (bounds < n)])
    out = []
    for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, n]):
        out.append((float(sp[lo:hi].mean()), float(sy[lo:hi].mean()), int(hi - lo)))
    return out


# ---------------------------------------------------------------------------
# Calibration slope and intercept
# ---------------------------------------------------------------------------

def _loglik(X, y, offset, beta) -> float:
    eta = X @ beta + offset
    # log(1 + e^eta) computed stably
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _newton_logistic(X, y, offset, tol=1e-10, max_iter=100):
    beta = np.zeros(X.shape[1])
    grad_norm = math.inf
    ll = _loglik(X, y, offset, beta)
    for it in range(max_iter):
        mu = expit(X @ beta + offset)
        grad = X.T @ (y - mu)
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < tol:
            return beta, it
        w = mu * (1.0 - mu)
        hess = X.T @ (X * w[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise ConvergenceError(f"IRLS hit a singular Hessian at iteration {it} "
                                   f"(gradient norm {grad_norm:.3e}, coefficients {beta.tolist()})") from None
        # halve the Newton step while the log-likelihood drops by more than rounding noise
        for _ in range(40):
            new_ll = _loglik(X, y, offset, beta + step)
            if new_ll >= ll - 1e-9 * (1.0 + abs(ll)):
                break
            step = step / 2.0
        beta = beta + step
        ll = new_ll
    raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations "
                           f"(gradient norm {grad_norm:.3e}, coefficients {beta.tolist()})")


def calibration_slope_intercept(y, p) -> tuple[float | None, float]:
    """Logistic recalibration of outcomes on ``logit(p)``.

    The slope is the ``logit(p)`` coefficient of ``y ~ 1 + logit(p)``; the
    intercept comes from ``y ~ 1 + offset(logit(p))`` (calibration in the
    large). Both fits use Newton/IRLS to a gradient norm below 1e-10.
    Predictions are clamped to ``[1e-6, 1 - 1e-6]``. The slope is ``None``
    when ``p`` is constant.
    """
    y, p = _check(y, p)
    if y.min() == y.max():
        raise ValueError("calibration needs both outcome classes")
    lp = logit(np.clip(p, CLAMP, 1.0 - CLAMP))
    ones = np.ones((len(y), 1))
    (intercept,), _ = _newton_logistic(ones, y, lp)
    if lp.max() == lp.min():
        return None, float(intercept)
    (_, slope), _ = _newton_logistic(np.column_stack([ones[:, 0], lp]), y, np.zeros(len(y)))
    return float(slope), float(intercept)


# ---------------------------------------------------------------------------
# Integrated calibration index
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _loess_sorted(x, y, q):
    n = x.shape[0]
    out = np.empty(n)
    lo = 0
    for i in range(n):
        x0 = x[i]
        while lo + q < n and x0 - x[lo] > x[lo + q] - x0:
            lo += 1
        h = max(x0 - x[lo], x[lo + q - 1] - x0)
        sw = 0.0
        swx = 0.0
        swy = 0.0
        for j in range(lo, lo + q):
            if h > 0.0:
                d = abs(x[j] - x0) / h
                if d >= 1.0:
                    continue
                t = 1.0 - d * d * d
                w = t * t * t
            else:
                w = 1.0
            sw += w
            swx += w * x[j]
            swy += w * y[j]
        xm = swx / sw
        ym = swy / sw
        sxx = 0.0
        sxy = 0.0
        for j in range(lo, lo + q):
            if h > 0.0:
                d = abs(x[j] - x0) / h
                if d >= 1.0:
                    continue
                t = 1.0 - d * d * d
                w = t * t * t
            else:
                w = 1.0
            sxx += w * (x[j] - xm) * (x[j] - xm)
            sxy += w * (x[j] - xm) * (y[j] - ym)
        if sxx > 1e-14 * sw:
            out[i] = ym + sxy / sxx * (x0 - xm)
        else:
            out[i] = ym
    return out


def loess(x, y, span: float = 0.75) -> np.ndarray:
    """Local linear regression with tricube weights, evaluated at each ``x``.

    The bandwidth at each point is the distance to its ``floor(span * n)``-th
    nearest neighbour.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    q = max(2, min(n, int(math.floor(span * n))))
    order = np.argsort(x, kind="stable")
    fitted = np.empty(n)
    fitted[order] = _loess_sorted(np.ascontiguousarray(x[order]), np.ascontiguousarray(y[order]), q)
    return fitted


def ici_family(y, p, span: float = 0.75) -> tuple[float, float, float, float]:
    """``(ICI, E50, E90, Emax)`` of ``|loess(y ~ p) - p|``."""
    y, p = _check(y, p)
    if len(y) < 50:
        raise ValueError(f"ICI needs at least 50 rows, got {len(y)}")
    d = np.abs(loess(p, y, span) - p)
    return (float(d.mean()), float(np.median(d)), float(np.percentile(d, 90)), float(d.max()))


@dataclass
class CalibrationReport:
    slope: float | None
    intercept: float
    ici: float
    e50: float
    e90: float
    emax: float
    curve: list[tuple[float, float, int]] = field(default_factory=list)

    @property
    def slope_defined(self) -> bool:
        return self.slope is not None

    def to_dict(self) -> dict:
        return {
            "slope": self.slope, "slope_defined": self.slope_defined, "intercept": self.intercept,
            "ici": self.ici, "e50": self.e50, "e90": self.e90, "emax": self.emax,
            "curve": [{"mean_predicted": a, "observed": b, "count": c} for a, b, c in self.curve],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def curve_csv(self) -> str:
        lines = ["mean_predicted,observed,count"]
        lines += [f"{a!r},{b!r},{c}" for a, b, c in self.curve]
        return "\n".join(lines) + "\n"


def calibration_report(y, p, n_bins: int = 10) -> CalibrationReport:
    slope, intercept = calibration_slope_intercept(y, p)
    ici, e50, e90, emax = ici_family(y, p)
    return CalibrationReport(slope, intercept, ici, e50, e90, emax, calibration_curve(y, p, n_bins))


# ---------------------------------------------------------------------------
# Likelihood ratios
# ---------------------------------------------------------------------------

def lr_positive(cm: ConfusionMatrix) -> float:
    """``sensitivity / (1 - specificity)``.

    ``inf`` when there are no false positives but some true positives, NaN
    when the threshold flags nobody (0/0).
    """
    if cm.fp == 0:
        return math.inf if cm.tp > 0 else math.nan
    return cm.sensitivity / (1.0 - cm.specificity)


def post_test_delta(lr: float, pretest: float) -> float:
    """Change from pretest to post-test probability under odds * LR."""
    if not 0.0 < pretest < 1.0:
        raise ValueError(f"pretest probability must be in (0, 1), got {pretest}")
    if math.isnan(lr):
        return math.nan
    if math.isinf(lr):
        return 1.0 - pretest
    odds = lr * pretest / (1.0 - pretest)
    return odds / (1.0 + odds) - pretest


@dataclass(frozen=True)
class LRPoint:
    threshold: float
    sensitivity: float
    specificity: float
    lr_positive: float
    post_test_delta: float

    @property
    def flag(self) -> str:
        if math.isinf(self.lr_positive):
            return "infinite"
        if math.isnan(self.lr_positive):
            return "undefined"
        return ""


@dataclass
class LRCurve:
    points: list[LRPoint]
    argmax_threshold: float | None
    pretest: float

    @property
    def best(self) -> LRPoint | None:
        for pt in self.points:
            if pt.threshold == self.argmax_threshold:
                return pt
        return None

    def to_dict(self) -> dict:
        return {
            "pretest": self.pretest,
            "argmax_threshold": self.argmax_threshold,
            "points": [{"threshold": pt.threshold, "sensitivity": pt.sensitivity,
                        "specificity": pt.specificity, "lr_positive": _token(pt.lr_positive),
                        "post_test_delta": _token(pt.post_test_delta), "flag": pt.flag}
                       for pt in self.points],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        lines = ["threshold,sensitivity,specificity,lr_positive,post_test_delta,flag"]
        for pt in self.points:
            lines.append(f"{pt.threshold!r},{pt.sensitivity!r},{pt.specificity!r},"
                         f"{_token(pt.lr_positive)},{_token(pt.post_test_delta)},{pt.flag}")
        return "\n".join(lines) + "\n"


def _token(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return v


def default_thresholds(start: float = 0.01, stop: float = 0.99, step: float = 0.01) -> np.ndarray:
    n = int(round((stop - start) / step)) + 1
    return np.round(start + step * np.arange(n), 10)


def lr_sweep(y, p, thresholds: Sequence[float] | None = None, pretest: float | None = None) -> LRCurve:
    """LR+ and post-test probability change at each threshold.

    ``pretest`` defaults to the prevalence of ``y``. The argmax ignores
    infinite and undefined ratios; ties go to the lowest threshold.
    """
    y, p = _check(y, p)
    grid = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if len(grid) == 0:
        raise ValueError("threshold grid is empty")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("thresholds must be strictly increasing")
    pretest = float(y.mean()) if pretest is None else float(pretest)
    points = []
    best, best_lr = None, -math.inf
    for t in grid:
        cm = confusion(y, p, float(t))
        lr = lr_positive(cm)
        points.append(LRPoint(float(t), cm.sensitivity, cm.specificity, lr, post_test_delta(lr, pretest)))
        if math.isfinite(lr) and lr > best_lr:
            best, best_lr = float(t), lr
    return LRCurve(points, best, pretest)
