"""Sequential Bayesian navigation filter.

Prediction pushes the Gaussian belief through the motion model with an
unscented transform over the state augmented by the four driving-noise
terms.  The update samples particles from the predicted Gaussian, weights
them with the compass/altitude likelihood times the association-aware
detection likelihood, and collapses the weighted particles back into a
Gaussian.

Steps on which no gated landmark can be in view of any plausible state
(k-sigma test, see ``FilterConfig.skip_sigma``) carry a detection factor that
is identical for every particle.  The remaining compass/altitude likelihood
is linear-Gaussian in the state, so those steps are updated in closed form
unless ``analytic_skip`` is turned off.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .association import (
    approx_loglik_kernel,
    bp_kernel,
    exact_loglik_kernel,
    g_table_kernel,
    gate_indices,
    reachable_kernel,
    BP_MAX_ITER,
    BP_TOL,
)
from .errors import (
    DegenerateWeights,
    FilterStepError,
    NonPositiveDefinite,
    NonPositiveDt,
    TooLargeForEnumeration,
)
from .geometry import LandmarkMap, VehicleState, _wrap
from .models import (
    ControlInput,
    DetectionSet,
    DrivingNoiseParams,
    MeasurementNoiseParams,
    aux_loglik_kernel,
    transition_kernel,
)

log = logging.getLogger(__name__)

JITTER = 1e-10
EXACT_MAX_DETECTIONS = 16


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(4)
        mean[2] = _wrap(mean[2])
        cov = np.array(self.cov, dtype=float).reshape(4, 4)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @classmethod
    def from_state(cls, state: VehicleState, sigmas: Sequence[float] = (0, 0, 0, 0)):
        return cls(state.as_array(), np.diag(np.square(sigmas)))

    def state(self) -> VehicleState:
        return VehicleState.from_array(self.mean)


@dataclass
class ParticleSet:
    states: np.ndarray
    log_weights: np.ndarray
    normalized: bool = False

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def normalize(self) -> "ParticleSet":
        lw = self.log_weights
        m = lw.max()
        if not np.isfinite(m):
            raise DegenerateWeights("all particle log-weights are -inf")
        lse = m + math.log(np.exp(lw - m).sum())
        return ParticleSet(self.states, lw - lse, True)

    def effective_sample_size(self) -> float:
        w = self.weights
        return float(1.0 / np.dot(w, w))


@dataclass(frozen=True)
class FilterConfig:
    driving: DrivingNoiseParams = field(default_factory=DrivingNoiseParams)
    measurement: MeasurementNoiseParams = field(default_factory=MeasurementNoiseParams)
    particle_count: int = 10_000
    gamma_gate: float = 6.6
    seed: int = 0
    association: str = "bp"  # "bp" | "exact"
    use_detections: bool = True
    use_aux: bool = True
    analytic_skip: bool = True
    skip_sigma: float = 6.0
    record_timing: bool = True

    def __post_init__(self):
        if self.particle_count < 1:
            raise ValueError("particle_count must be >= 1")
        if self.gamma_gate <= 0:
            raise ValueError("gamma_gate must be > 0")
        if self.association not in ("bp", "exact"):
            raise ValueError(f"unknown association mode {self.association!r}")
        m = self.measurement
        if self.use_aux and (m.sigma_c <= 0 or m.sigma_h <= 0):
            raise ValueError("compass and altitude noise must be > 0 when aux measurements are used")
        if self.use_detections and m.sigma_d <= 0:
            raise ValueError("sigma_d must be > 0")

    @classmethod
    def dead_reckoning(cls, cfg: "FilterConfig") -> "FilterConfig":
        return replace(cfg, use_detections=False, use_aux=False)


@dataclass
class UpdateDiagnostics:
    d_gated: int = 0
    n_detections: int = 0
    ess: float = math.nan
    bp_iterations: int = 0
    bp_converged: bool = True
    analytic: bool = False
    degenerate: bool = False
    active_landmarks: int = 0


# --------------------------------------------------------------------------
# kernels


@njit(cache=True)
def psd_cholesky(A):
    """Lower-triangular factor of a PSD matrix; zero pivots give zero columns."""
    n = A.shape[0]
    Lm = np.zeros((n, n))
    scale = 0.0
    for i in range(n):
        scale = max(scale, abs(A[i, i]))
    zero_tol = 1e-14 * scale
    neg_tol = -1e-10 * max(scale, 1.0)
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= Lm[j, k] * Lm[j, k]
        if s > zero_tol:
            d = math.sqrt(s)
            Lm[j, j] = d
            for i in range(j + 1, n):
                t = A[i, j]
                for k in range(j):
                    t -= Lm[i, k] * Lm[j, k]
                Lm[i, j] = t / d
        elif s < neg_tol:
            return Lm, False
    return Lm, True


@njit(cache=True)
def _sqrt_with_jitter(A):
    Lm, ok = psd_cholesky(A)
    if ok:
        return Lm, True
    B = A.copy()
    for i in range(B.shape[0]):
        B[i, i] += JITTER
    return psd_cholesky(B)


@njit(cache=True)
def moments_kernel(pts, w):
    """Weighted mean and covariance; heading (column 2) is averaged circularly."""
    n = pts.shape[0]
    mean = np.zeros(4)
    sc = 0.0
    cc = 0.0
    for i in range(n):
        mean[0] += w[i] * pts[i, 0]
        mean[1] += w[i] * pts[i, 1]
        mean[3] += w[i] * pts[i, 3]
        sc += w[i] * math.sin(pts[i, 2])
        cc += w[i] * math.cos(pts[i, 2])
    mean[2] = math.atan2(sc, cc)
    cov = np.zeros((4, 4))
    r = np.empty(4)
    for i in range(n):
        r[0] = pts[i, 0] - mean[0]
        r[1] = pts[i, 1] - mean[1]
        r[2] = _wrap(pts[i, 2] - mean[2])
        r[3] = pts[i, 3] - mean[3]
        for a in range(4):
            for b in range(a, 4):
                cov[a, b] += w[i] * r[a] * r[b]
    for a in range(4):
        for b in range(a):
            cov[a, b] = cov[b, a]
    return mean, cov


@njit(cache=True)
def ut_predict_kernel(mean, cov, us, ut, sig, dt):
    N = 8
    S = np.zeros((N, N))
    for a in range(4):
        for b in range(4):
            S[a, b] = N * cov[a, b]
        S[4 + a, 4 + a] = N * sig[a] * sig[a]
    Lm, ok = _sqrt_with_jitter(S)
    pts = np.empty((2 * N, 4))
    if not ok:
        return mean.copy(), cov.copy(), False
    eta = np.zeros(N)
    eta[:4] = mean
    for i in range(N):
        for sgn in range(2):
            s = 1.0 if sgn == 0 else -1.0
            p = eta + s * Lm[:, i]
            x1, y1, th1, g1 = transition_kernel(
                p[0], p[1], p[2], p[3], us, ut, p[4], p[5], p[6], p[7], dt
            )
            row = 2 * i + sgn
            pts[row, 0] = x1
            pts[row, 1] = y1
            pts[row, 2] = th1
            pts[row, 3] = g1
    w = np.full(2 * N, 1.0 / (2 * N))
    m, c = moments_kernel(pts, w)
    return m, c, True


@njit(cache=True)
def sample_kernel(mean, Lm, z):
    I = z.shape[0]
    out = np.empty((I, 4))
    for i in range(I):
        for a in range(4):
            v = mean[a]
            for b in range(a + 1):
                v += Lm[a, b] * z[i, b]
            out[i, a] = v
        out[i, 2] = _wrap(out[i, 2])
        if out[i, 3] < 0.0:
            out[i, 3] = 0.0
    return out


@njit(cache=True)
def aux_kalman_kernel(mean, cov, y_c, y_h, sigma_c, sigma_h):
    """Closed-form update with the compass and altitude measurements."""
    s00 = cov[2, 2] + sigma_c * sigma_c
    s01 = cov[2, 3]
    s11 = cov[3, 3] + sigma_h * sigma_h
    det = s00 * s11 - s01 * s01
    i00 = s11 / det
    i01 = -s01 / det
    i11 = s00 / det
    v0 = _wrap(y_c - mean[2])
    v1 = y_h - mean[3]
    K = np.empty((4, 2))
    for a in range(4):
        K[a, 0] = cov[a, 2] * i00 + cov[a, 3] * i01
        K[a, 1] = cov[a, 2] * i01 + cov[a, 3] * i11
    m = mean.copy()
    for a in range(4):
        m[a] += K[a, 0] * v0 + K[a, 1] * v1
    m[2] = _wrap(m[2])
    if m[3] < 0.0:
        m[3] = 0.0
    c = cov.copy()
    # Joseph-free form; C - K H C
    for a in range(4):
        for b in range(4):
            c[a, b] = cov[a, b] - (K[a, 0] * cov[2, b] + K[a, 1] * cov[3, b])
    for a in range(4):
        for b in range(a):
            v = 0.5 * (c[a, b] + c[b, a])
            c[a, b] = v
            c[b, a] = v
    return m, c


@njit(cache=True)
def systematic_kernel(w, u):
    n = w.shape[0]
    idx = np.empty(n, dtype=np.int64)
    j = 0
    c = w[0]
    for i in range(n):
        pos = (u + i) / n
        while pos > c and j < n - 1:
            j += 1
            c += w[j]
        idx[i] = j
    return idx


# --------------------------------------------------------------------------
# array-level steps shared by the public API and the run loop


def _predict_arrays(mean, cov, us, ut, sig, dt):
    if not dt > 0:
        raise NonPositiveDt(f"dt must be > 0, got {dt}")
    m, c, ok = ut_predict_kernel(mean, cov, float(us), float(ut), sig, float(dt))
    if not ok:
        raise NonPositiveDefinite("augmented covariance is not positive semidefinite")
    return m, c


def _sample_particles(mean, cov, count, rng):
    Lm, ok = _sqrt_with_jitter(cov)
    if not ok:
        raise NonPositiveDefinite("predicted covariance is not positive semidefinite")
    z = rng.standard_normal((count, 4))
    return sample_kernel(mean, Lm, z)


def _particle_update(mean, cov, dets, y_c, y_h, lms, sig, cfg: FilterConfig, rng, diag):
    m = cfg.measurement
    P = _sample_particles(mean, cov, cfg.particle_count, rng)
    logw = np.zeros(P.shape[0])
    if cfg.use_aux:
        aux_loglik_kernel(P, y_c, y_h, m.sigma_c, m.sigma_h, logw)
    if cfg.use_detections and lms.shape[0]:
        g, active = g_table_kernel(
            P, lms, sig, dets, m.p_det, m.mu_c, m.clutter_level, m.r_max
        )
        diag.active_landmarks = int(active.sum())
        if active.any():
            g = np.ascontiguousarray(g[:, active])
            if cfg.association == "exact":
                if dets.shape[0] > EXACT_MAX_DETECTIONS:
                    raise TooLargeForEnumeration(
                        f"{dets.shape[0]} detections exceed the exact-association limit"
                    )
                exact_loglik_kernel(g, logw)
            else:
                kappa, it, conv = bp_kernel(g.mean(axis=0), BP_TOL, BP_MAX_ITER)
                diag.bp_iterations = int(it)
                diag.bp_converged = bool(conv)
                if not conv:
                    log.debug("BP did not converge in %d iterations", it)
                approx_loglik_kernel(g, kappa, logw)
    particles = ParticleSet(P, logw)
    try:
        particles = particles.normalize()
    except DegenerateWeights:
        diag.degenerate = True
        return mean, cov, None
    w = particles.weights
    diag.ess = float(1.0 / np.dot(w, w))
    post_mean, post_cov = moments_kernel(P, w)
    idx = systematic_kernel(w, rng.random())
    resampled = ParticleSet(
        P[idx], np.full(P.shape[0], -math.log(P.shape[0])), True
    )
    return post_mean, post_cov, resampled


def _update_arrays(mean, cov, dets, y_c, y_h, landmark_map, sig_all, cfg, rng):
    diag = UpdateDiagnostics(n_detections=int(dets.shape[0]))
    if not (cfg.use_detections or cfg.use_aux):
        diag.analytic = True
        return mean, cov, None, diag
    m = cfg.measurement
    lms = np.zeros((0, 5))
    sig = np.zeros(0)
    if cfg.use_detections and len(landmark_map):
        gidx = gate_indices(landmark_map, mean, cov, m.r_max, cfg.gamma_gate)
        diag.d_gated = int(gidx.shape[0])
        if gidx.shape[0]:
            lms = landmark_map.array[gidx]
            sig = sig_all[gidx]
    if cfg.analytic_skip:
        reach = reachable_kernel(lms, mean, cov, m.r_max, cfg.skip_sigma)
        if not reach.any():
            diag.analytic = True
            if cfg.use_aux:
                mean, cov = aux_kalman_kernel(mean, cov, y_c, y_h, m.sigma_c, m.sigma_h)
            return mean, cov, None, diag
    pm, pc, particles = _particle_update(mean, cov, dets, y_c, y_h, lms, sig, cfg, rng, diag)
    return pm, pc, particles, diag


def _sigma_table(landmark_map: LandmarkMap, params: MeasurementNoiseParams) -> np.ndarray:
    return np.array([params.sigma_d_for(int(i)) for i in landmark_map.ids], dtype=float)


# --------------------------------------------------------------------------
# public operations


def predict(
    belief: GaussianBelief,
    u: ControlInput,
    params: DrivingNoiseParams,
    dt: float,
) -> GaussianBelief:
    """Unscented prediction over the state augmented with the driving noise.

    Uses 2N = 16 sigma points at ``eta +/- columns of sqrt(N * Sigma)`` with
    equal weights 1/(2N); the central point carries no weight.
    """
    m, c = _predict_arrays(belief.mean, belief.cov, u.speed, u.turn_rate, params.as_array(), dt)
    return GaussianBelief(m, c)


def update(
    pred: GaussianBelief,
    dets: DetectionSet,
    landmark_map: LandmarkMap,
    cfg: FilterConfig,
    rng: Optional[np.random.Generator] = None,
) -> tuple[GaussianBelief, Optional[ParticleSet], UpdateDiagnostics]:
    """Particle update of the predicted belief.

    Returns the posterior Gaussian, the resampled particle set (``None`` for
    closed-form or degenerate steps) and per-step diagnostics.  When every
    particle gets zero likelihood the predicted belief is returned and
    ``diagnostics.degenerate`` is set.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    m, c, particles, diag = _update_arrays(
        pred.mean, pred.cov, dets.as_array(), dets.heading, dets.altitude,
        landmark_map, _sigma_table(landmark_map, cfg.measurement), cfg, rng,
    )
    return GaussianBelief(m, c), particles, diag


def resample(p: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    """Systematic resampling to uniform weights."""
    if not p.normalized:
        p = p.normalize()
    w = p.weights
    idx = systematic_kernel(w / w.sum(), rng.random())
    n = len(p)
    return ParticleSet(p.states[idx], np.full(n, -math.log(n)), True)


@dataclass
class FilterStep:
    t: float
    u: ControlInput
    dets: DetectionSet


@dataclass
class RunResult:
    """Per-step filter output.  Row 0 is the initial belief."""

    t: np.ndarray
    mean: np.ndarray  # (K, 4)
    cov: np.ndarray  # (K, 4, 4)
    d_gated: np.ndarray
    n_detections: np.ndarray
    ess: np.ndarray
    update_micros: np.ndarray
    analytic: np.ndarray
    degenerate: np.ndarray
    bp_iterations: np.ndarray

    def __len__(self) -> int:
        return self.t.shape[0]


@dataclass
class StepData:
    """A run's inputs in columnar form.

    ``det_offsets[k]:det_offsets[k + 1]`` selects the rows of ``det_values``
    that belong to step k.
    """

    t: np.ndarray
    controls: np.ndarray  # (K, 2), control applied on the way into step k
    y_c: np.ndarray
    y_h: np.ndarray
    det_offsets: np.ndarray
    det_values: np.ndarray

    def __len__(self) -> int:
        return self.t.shape[0]

    def detections(self, k: int) -> np.ndarray:
        return self.det_values[self.det_offsets[k]:self.det_offsets[k + 1]]

    @classmethod
    def from_steps(cls, t0: float, steps: Sequence[FilterStep]) -> "StepData":
        t = np.array([t0] + [s.t for s in steps], dtype=float)
        controls = np.array([(0.0, 0.0)] + [(s.u.speed, s.u.turn_rate) for s in steps])
        y_c = np.array([math.nan] + [s.dets.heading for s in steps])
        y_h = np.array([math.nan] + [s.dets.altitude for s in steps])
        counts = [0] + [len(s.dets) for s in steps]
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        vals = [s.dets.as_array() for s in steps]
        det_values = np.concatenate(vals) if vals else np.zeros((0, 2))
        return cls(t, controls.reshape(-1, 2), y_c, y_h, offsets, det_values.reshape(-1, 2))


def run_arrays(
    data: StepData,
    initial: GaussianBelief,
    landmark_map: LandmarkMap,
    cfg: FilterConfig,
) -> RunResult:
    K = len(data)
    rng = np.random.default_rng(cfg.seed)
    sig_drv = cfg.driving.as_array()
    sig_all = _sigma_table(landmark_map, cfg.measurement)
    means = np.empty((K, 4))
    covs = np.empty((K, 4, 4))
    d_gated = np.zeros(K, dtype=np.int64)
    n_det = np.zeros(K, dtype=np.int64)
    ess = np.full(K, math.nan)
    micros = np.zeros(K)
    analytic = np.zeros(K, dtype=bool)
    degenerate = np.zeros(K, dtype=bool)
    bp_it = np.zeros(K, dtype=np.int64)
    mean, cov = initial.mean.copy(), initial.cov.copy()
    means[0], covs[0] = mean, cov
    t, ctrl, y_c, y_h = data.t, data.controls, data.y_c, data.y_h
    offs, vals = data.det_offsets, data.det_values
    perf = time.perf_counter_ns
    for k in range(1, K):
        try:
            mean, cov = _predict_arrays(mean, cov, ctrl[k, 0], ctrl[k, 1], sig_drv, t[k] - t[k - 1])
            t0 = perf()
            dets = vals[offs[k]:offs[k + 1]]
            mean, cov, _, diag = _update_arrays(
                mean, cov, dets, y_c[k], y_h[k], landmark_map, sig_all, cfg, rng
            )
            t1 = perf()
        except Exception as e:  # noqa: BLE001 - re-raised with the step index
            raise FilterStepError(k, e) from e
        if diag.degenerate:
            log.warning("step %d: degenerate weights, keeping the prediction", k)
        means[k], covs[k] = mean, cov
        d_gated[k] = diag.d_gated
        n_det[k] = diag.n_detections
        ess[k] = diag.ess
        analytic[k] = diag.analytic
        degenerate[k] = diag.degenerate
        bp_it[k] = diag.bp_iterations
        if cfg.record_timing:
            micros[k] = (t1 - t0) / 1000.0
    return RunResult(t.copy(), means, covs, d_gated, n_det, ess, micros, analytic, degenerate, bp_it)


def run(
    steps: Sequence[FilterStep],
    initial: GaussianBelief,
    landmark_map: LandmarkMap,
    cfg: FilterConfig,
    t0: float = 0.0,
) -> RunResult:
    """Alternate prediction and update over a time-ordered step sequence.

    ``initial`` is the belief at time ``t0``; the per-step means are the
    filter's state estimates.
    """
    return run_arrays(StepData.from_steps(t0, steps), initial, landmark_map, cfg)
