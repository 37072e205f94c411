"""Accuracy and timing metrics for batches of filter runs.

RMSE is pooled across runs: at each time step it is the square root of the
mean squared position error over all runs.  Both the horizontal (x, y) and
the 3-D (x, y, altitude) variants are computed; the 2-D one is the headline
metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .errors import MisalignedSeries
from .filter import FilterConfig, GaussianBelief, RunResult, StepData, run_arrays
from .geometry import LandmarkMap

TIME_ATOL = 1e-9


@dataclass(frozen=True)
class Track:
    """Timestamped states, one row per step: ``(x, y, theta, gamma)``."""

    t: np.ndarray
    states: np.ndarray


@dataclass
class ErrorSeries:
    t: np.ndarray
    err_2d: np.ndarray  # (runs, K)
    err_3d: np.ndarray

    @property
    def runs(self) -> int:
        return self.err_2d.shape[0]

    @property
    def rmse_2d(self) -> np.ndarray:
        return np.sqrt(np.mean(self.err_2d**2, axis=0))

    @property
    def rmse_3d(self) -> np.ndarray:
        return np.sqrt(np.mean(self.err_3d**2, axis=0))

    def rmse(self, dims: int = 2) -> np.ndarray:
        return self.rmse_2d if dims == 2 else self.rmse_3d


@dataclass
class TimingStats:
    d_gated: np.ndarray
    mean_micros: np.ndarray
    n: np.ndarray
    slope: float
    intercept: float
    quad_coef: float
    quad_pvalue: float
    # |quadratic contribution| at the largest D relative to the fitted value there
    quad_relative: float

    def quadratic_significant(self, alpha: float = 0.05, rel_tol: float = 0.1) -> bool:
        """True when the D^2 term is both statistically and practically significant."""
        return bool(self.quad_pvalue < alpha and self.quad_relative > rel_tol)


def _as_track(x) -> Track:
    if isinstance(x, Track):
        return x
    if isinstance(x, RunResult):
        return Track(x.t, x.mean)
    t, s = x
    return Track(np.asarray(t, float), np.asarray(s, float))


def rmse_series(estimates: Sequence, truths: Sequence) -> ErrorSeries:
    """Per-step position errors of each run and their pooled RMSE.

    ``estimates`` and ``truths`` are equally long sequences of ``Track``s
    (or ``(t, states)`` pairs, or filter ``RunResult``s) sharing timestamps.
    """
    if len(estimates) != len(truths):
        raise MisalignedSeries(f"{len(estimates)} estimate runs vs {len(truths)} truth runs")
    if not estimates:
        raise MisalignedSeries("at least one run is required")
    e2, e3 = [], []
    t_ref = None
    for i, (est, tru) in enumerate(zip(estimates, truths)):
        est, tru = _as_track(est), _as_track(tru)
        if est.t.shape != tru.t.shape or not np.allclose(est.t, tru.t, rtol=0, atol=TIME_ATOL):
            raise MisalignedSeries(f"run {i}: estimate and truth timestamps differ")
        if t_ref is None:
            t_ref = tru.t
        elif t_ref.shape != tru.t.shape or not np.allclose(t_ref, tru.t, rtol=0, atol=TIME_ATOL):
            raise MisalignedSeries(f"run {i}: timestamps differ from run 0")
        d = est.states[:, [0, 1, 3]] - tru.states[:, [0, 1, 3]]
        e2.append(np.hypot(d[:, 0], d[:, 1]))
        e3.append(np.sqrt(np.sum(d * d, axis=1)))
    return ErrorSeries(np.asarray(t_ref, float), np.array(e2), np.array(e3))


def cf_curve(errors, thresholds: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Empirical probability that a per-step error is at most each threshold.

    ``errors`` is an ``ErrorSeries`` (its 2-D errors are pooled) or any array
    of errors.
    """
    e = errors.err_2d if isinstance(errors, ErrorSeries) else np.asarray(errors, float)
    e = np.sort(e.ravel())
    if e.size == 0:
        raise ValueError("cf_curve needs at least one error")
    if thresholds is None:
        thresholds = np.linspace(0.0, max(float(e[-1]), 1e-9), 201)
    thresholds = np.asarray(thresholds, float)
    p = np.searchsorted(e, thresholds, side="right") / e.size
    return thresholds, p


def window_means(values: np.ndarray, t: np.ndarray, width: float = 60.0) -> np.ndarray:
    """Means of ``values`` over consecutive windows of ``width`` seconds (row 0 excluded)."""
    t = np.asarray(t, float)
    idx = np.floor((t[1:] - t[0] - 1e-12) / width).astype(int)
    sums = np.bincount(idx, weights=np.asarray(values, float)[1:])
    counts = np.bincount(idx)
    keep = counts > 0
    return sums[keep] / counts[keep]


def tail_mean(values: np.ndarray, t: np.ndarray, seconds: float) -> float:
    """Mean over the final ``seconds`` of the series."""
    t = np.asarray(t, float)
    return float(np.mean(np.asarray(values)[t >= t[-1] - seconds + 1e-12]))


def value_at(values: np.ndarray, t: np.ndarray, when: float) -> float:
    """Series value at the step nearest to time ``when``."""
    return float(np.asarray(values)[int(np.argmin(np.abs(np.asarray(t) - when)))])


def is_increasing(xs: np.ndarray) -> bool:
    return bool(np.all(np.diff(xs) > 0))


def timing_by_gated(d_gated: np.ndarray, micros: np.ndarray) -> TimingStats:
    """Mean update time per gated-landmark count, with linear and quadratic fits.

    Steps with a non-positive duration (timing disabled, or no particle
    update) are ignored.
    """
    d = np.asarray(d_gated, float)
    m = np.asarray(micros, float)
    keep = m > 0
    d, m = d[keep], m[keep]
    if d.size == 0:
        raise ValueError("no positive update durations")
    buckets, inv, n = np.unique(d, return_inverse=True, return_counts=True)
    means = np.bincount(inv, weights=m) / n

    if buckets.size >= 2:
        slope, intercept = np.polyfit(d, m, 1)
    else:
        slope, intercept = 0.0, float(m.mean())
    quad, pval, rel = 0.0, 1.0, 0.0
    if buckets.size >= 3:
        X = np.column_stack([np.ones_like(d), d, d * d])
        beta, *_ = np.linalg.lstsq(X, m, rcond=None)
        quad = float(beta[2])
        dof = d.size - 3
        resid = m - X @ beta
        s2 = float(resid @ resid) / dof if dof > 0 else 0.0
        cov = s2 * np.linalg.pinv(X.T @ X)
        se = math.sqrt(max(cov[2, 2], 0.0))
        if se > 0:
            pval = float(2.0 * stats.t.sf(abs(quad) / se, dof))
        elif quad != 0.0:
            pval = 0.0
        dmax = float(buckets[-1])
        fitted = float(beta[0] + beta[1] * dmax + beta[2] * dmax * dmax)
        rel = abs(quad) * dmax * dmax / abs(fitted) if fitted != 0 else math.inf
    return TimingStats(buckets.astype(int), means, n, float(slope), float(intercept), quad, pval, rel)


def dead_reckoning(
    data: StepData,
    initial: GaussianBelief,
    landmark_map: LandmarkMap,
    cfg: FilterConfig,
) -> RunResult:
    """The filter's motion model alone: detections and aux measurements ignored."""
    return run_arrays(data, initial, landmark_map, FilterConfig.dead_reckoning(cfg))


def summarize(series_dr: ErrorSeries, series_sss: ErrorSeries, final_window: float = 120.0) -> dict:
    """Headline numbers for a DR-versus-SSS comparison."""
    t = series_sss.t
    out = {"runs": series_sss.runs, "rmse_dims": 2}
    for name, s in (("dr", series_dr), ("sss", series_sss)):
        r = s.rmse_2d
        out[f"final_rmse_{name}"] = float(r[-1])
        out[f"final_window_rmse_{name}"] = tail_mean(r, t, final_window)
        out[f"final_rmse_3d_{name}"] = float(s.rmse_3d[-1])
        out[f"mean_rmse_{name}"] = float(r[1:].mean()) if r.size > 1 else float(r.mean())
    return out
