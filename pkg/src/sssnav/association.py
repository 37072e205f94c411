"""Measurement-origin uncertainty: which landmark produced which detection.

Each gated landmark ``d`` is either missed (``a_d = 0``) or produced exactly
one detection ``a_d = l``; no detection is claimed twice.  For a state x the
per-landmark factor is

    g(x, 0)  = 1 - p_det(m_d, x)
    g(x, l)  = p(z_l | x, m_d) / f_c(z_l) * p_det(m_d, x) / mu_c

The exact detection likelihood sums the product of factors over all valid
association vectors.  The approximate version replaces the exclusion
constraint by per-(landmark, detection) weights kappa obtained with loopy
belief propagation, which turns the sum into a product of (L + 1)-term sums.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .errors import SingularCovariance, TooLargeForEnumeration
from .geometry import LandmarkMap, VehicleState, crossing_kernel
from .models import DetectionSet, MeasurementNoiseParams

ENUMERATION_LIMIT = 20
BP_TOL = 1e-6
BP_MAX_ITER = 100
MU_C_FLOOR = 1e-12


@dataclass(frozen=True)
class GatedSet:
    ids: tuple[int, ...]
    gamma_gate: float
    indices: np.ndarray  # rows of LandmarkMap.array, same order as ids

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def of(cls, landmark_map: LandmarkMap, ids: Sequence[int], gamma_gate: float = 6.6):
        idx = np.array([landmark_map.index_of(i) for i in ids], dtype=np.int64)
        return cls(tuple(ids), gamma_gate, idx)


@dataclass(frozen=True)
class AssociationWeights:
    kappa: np.ndarray  # (D, L + 1); kappa[:, 0] == 1
    iterations: int
    converged: bool


# --------------------------------------------------------------------------
# enumeration (oracle)


def enumerate_valid(D: int, L: int) -> list[tuple[int, ...]]:
    """All association vectors in {0..L}^D in which no detection repeats."""
    if D * L > ENUMERATION_LIMIT:
        raise TooLargeForEnumeration(f"D*L = {D * L} exceeds {ENUMERATION_LIMIT}")
    out = []
    for a in itertools.product(range(L + 1), repeat=D):
        used = [l for l in a if l > 0]
        if len(used) == len(set(used)):
            out.append(a)
    return out


def count_valid(D: int, L: int) -> int:
    return sum(
        math.comb(D, j) * math.comb(L, j) * math.factorial(j)
        for j in range(min(D, L) + 1)
    )


# --------------------------------------------------------------------------
# kernels


@njit(cache=True)
def g_table_kernel(particles, lms, sig_d, dets, p_det, mu_c, fc_level, r_max):
    """Association factors g for every (particle, landmark, detection).

    Returns ``(g, active)`` where ``g`` has shape (I, D, L + 1) and
    ``active[d]`` tells whether landmark d is in view of at least one particle.
    Out-of-view landmarks get ``g = (1, 0, ..., 0)``.
    """
    I = particles.shape[0]
    D = lms.shape[0]
    L = dets.shape[0]
    g = np.zeros((I, D, L + 1))
    active = np.zeros(D, dtype=np.bool_)
    q2 = p_det / max(mu_c, MU_C_FLOOR)
    for i in range(I):
        px = particles[i, 0]
        py = particles[i, 1]
        th = particles[i, 2]
        gam = particles[i, 3]
        hx = math.cos(th)
        hy = math.sin(th)
        for d in range(D):
            g[i, d, 0] = 1.0
            cx = lms[d, 0]
            cy = lms[d, 1]
            rho = math.sqrt(lms[d, 3] * lms[d, 3] + lms[d, 4] * lms[d, 4]) + 1e-6
            ddx = cx - px
            ddy = cy - py
            # cheap rejection: landmark too far along-track or out of reach
            if abs(ddx * hx + ddy * hy) > rho:
                continue
            if ddx * ddx + ddy * ddy > (r_max + rho) * (r_max + rho):
                continue
            hit, tn, tf, zn, zf = crossing_kernel(
                px, py, th, gam, cx, cy, lms[d, 2], lms[d, 3], lms[d, 4], r_max
            )
            if not hit:
                continue
            active[d] = True
            g[i, d, 0] = 1.0 - p_det
            s2 = sig_d[d] * sig_d[d]
            norm = 1.0 / (2.0 * math.pi * s2)
            for l in range(L):
                e1 = dets[l, 0] - zn
                e2 = dets[l, 1] - zf
                lik = norm * math.exp(-0.5 * (e1 * e1 + e2 * e2) / s2)
                g[i, d, l + 1] = lik / fc_level * q2
    return g, active


@njit(cache=True)
def bp_kernel(avg_g, tol, max_iter):
    D = avg_g.shape[0]
    L = avg_g.shape[1] - 1
    kappa = np.ones((D, L + 1))
    if D == 0 or L == 0:
        return kappa, 0, True
    nu = np.ones((D, L))
    mu = np.zeros((D, L))
    new = np.empty((D, L))
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        for d in range(D):
            for l in range(L):
                den = avg_g[d, 0]
                for k in range(L):
                    if k != l:
                        den += avg_g[d, k + 1] * nu[d, k]
                num = avg_g[d, l + 1]
                if num == 0.0:
                    mu[d, l] = 0.0
                else:
                    mu[d, l] = num / max(den, 1e-300)
        delta = 0.0
        for l in range(L):
            for d in range(D):
                s = 1.0
                for k in range(D):
                    if k != d:
                        s += mu[k, l]
                new[d, l] = 1.0 / s
                c = abs(new[d, l] - nu[d, l])
                if c > delta:
                    delta = c
        nu[:, :] = new
        if delta < tol:
            converged = True
            break
    kappa[:, 1:] = nu
    return kappa, it, converged


@njit(cache=True)
def approx_loglik_kernel(g, kappa, out):
    """Add sum_d log sum_l kappa[d, l] g[i, d, l] to ``out[i]``."""
    I, D, L1 = g.shape
    for i in range(I):
        acc = 0.0
        for d in range(D):
            s = 0.0
            for l in range(L1):
                s += kappa[d, l] * g[i, d, l]
            acc += math.log(s) if s > 0.0 else -np.inf
        out[i] += acc


@njit(cache=True)
def exact_loglik_kernel(g, out):
    """Add the exact log-sum over valid association vectors to ``out[i]``.

    Dynamic programme over landmarks with a bitmask of claimed detections.
    Landmarks whose factor row is (1, 0, ..., 0) are skipped since they
    multiply every term by one.
    """
    I, D, L1 = g.shape
    L = L1 - 1
    M = 1 << L
    dp = np.empty(M)
    nxt = np.empty(M)
    for i in range(I):
        dp[:] = 0.0
        dp[0] = 1.0
        for d in range(D):
            trivial = g[i, d, 0] == 1.0
            for l in range(L):
                if g[i, d, l + 1] != 0.0:
                    trivial = False
            if trivial:
                continue
            for m in range(M):
                v = dp[m] * g[i, d, 0]
                for l in range(L):
                    bit = 1 << l
                    if m & bit:
                        v += dp[m ^ bit] * g[i, d, l + 1]
                nxt[m] = v
            dp[:] = nxt
        s = dp.sum()
        out[i] += math.log(s) if s > 0.0 else -np.inf


@njit(cache=True)
def gate_kernel(arr, rho, cand, mx, my, c00, c01, c11, r_max, gamma_gate):
    out = np.empty(cand.shape[0], dtype=np.int64)
    k = 0
    for j in range(cand.shape[0]):
        i = cand[j]
        infl = (r_max + rho[i]) ** 2
        a = c00 + infl
        b = c01
        c = c11 + infl
        det = a * c - b * b
        if not det > 0.0:
            raise ZeroDivisionError("singular gating matrix")
        dx = arr[i, 0] - mx
        dy = arr[i, 1] - my
        q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
        if q <= gamma_gate:
            out[k] = i
            k += 1
    return out[:k]


@njit(cache=True)
def reachable_kernel(lms, mean, cov, r_max, k):
    """Which landmarks could be in view of a state drawn from N(mean, cov).

    A conservative k-sigma test on the along-track offset of the landmark
    center (linearised in position and heading, plus a second-order heading
    margin) and on horizontal distance.
    """
    D = lms.shape[0]
    out = np.zeros(D, dtype=np.bool_)
    th = mean[2]
    hx = math.cos(th)
    hy = math.sin(th)
    nx = -hy
    ny = hx
    s_th = math.sqrt(max(cov[2, 2], 0.0))
    tr = cov[0, 0] + cov[1, 1]
    dt = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[0, 1]
    lmax = 0.5 * tr + math.sqrt(max(0.25 * tr * tr - dt, 0.0))
    s_pos = math.sqrt(max(lmax, 0.0))
    for d in range(D):
        rho = math.sqrt(lms[d, 3] ** 2 + lms[d, 4] ** 2)
        dx = lms[d, 0] - mean[0]
        dy = lms[d, 1] - mean[1]
        dist = math.sqrt(dx * dx + dy * dy)
        if dist - rho > r_max + k * s_pos:
            continue
        if k * s_th > 1.0:
            out[d] = True
            continue
        a0 = dx * hx + dy * hy
        j0 = -hx
        j1 = -hy
        j2 = dx * nx + dy * ny
        var = (
            j0 * j0 * cov[0, 0] + j1 * j1 * cov[1, 1] + j2 * j2 * cov[2, 2]
            + 2.0 * (j0 * j1 * cov[0, 1] + j0 * j2 * cov[0, 2] + j1 * j2 * cov[1, 2])
        )
        margin = k * math.sqrt(max(var, 0.0)) + (dist + k * s_pos) * 0.5 * (k * s_th) ** 2
        if abs(a0) - rho <= margin + 1e-9:
            out[d] = True
    return out


# --------------------------------------------------------------------------
# public operations


def _gated_arrays(gated: GatedSet, landmark_map: LandmarkMap, params: MeasurementNoiseParams):
    lms = landmark_map.array[gated.indices] if len(gated) else np.zeros((0, 5))
    sig = np.array([params.sigma_d_for(i) for i in gated.ids], dtype=float)
    return lms, sig


def association_factors(
    states: np.ndarray,
    dets: DetectionSet,
    gated: GatedSet,
    landmark_map: LandmarkMap,
    params: MeasurementNoiseParams,
) -> tuple[np.ndarray, np.ndarray]:
    """g table of shape (I, D_gated, L + 1) for an (I, 4) array of states."""
    lms, sig = _gated_arrays(gated, landmark_map, params)
    states = np.ascontiguousarray(np.atleast_2d(states), dtype=float)
    return g_table_kernel(
        states, lms, sig, dets.as_array(), params.p_det, params.mu_c,
        params.clutter_level, params.r_max,
    )


def exact_detection_log_likelihood(
    particle: VehicleState,
    dets: DetectionSet,
    gated: GatedSet,
    landmark_map: LandmarkMap,
    params: MeasurementNoiseParams,
) -> float:
    """Log of the sum over all valid association vectors (unnormalized)."""
    D, L = len(gated), len(dets)
    if D * L > ENUMERATION_LIMIT:
        raise TooLargeForEnumeration(f"D*L = {D * L} exceeds {ENUMERATION_LIMIT}")
    if D == 0:
        return 0.0
    g, _ = association_factors(particle.as_array(), dets, gated, landmark_map, params)
    g = g[0]
    total = 0.0
    for a in enumerate_valid(D, L):
        total += math.prod(g[d, a[d]] for d in range(D))
    return math.log(total) if total > 0 else -math.inf


def bp_kappa(avg_g: np.ndarray, tol: float = BP_TOL, max_iter: int = BP_MAX_ITER) -> AssociationWeights:
    """Loopy BP on the landmark/detection graph.

    Messages start at one and are updated in parallel (no damping) until
    the largest change of a detection-to-landmark message drops below
    ``tol`` or ``max_iter`` sweeps have run.
    """
    avg_g = np.ascontiguousarray(avg_g, dtype=float)
    if avg_g.ndim != 2 or (avg_g < 0).any():
        raise ValueError("avg_g must be a nonnegative (D, L + 1) table")
    kappa, it, ok = bp_kernel(avg_g, tol, max_iter)
    return AssociationWeights(kappa, int(it), bool(ok))


def approx_detection_log_likelihood(
    particle: VehicleState,
    dets: DetectionSet,
    gated: GatedSet,
    kappa: AssociationWeights | np.ndarray,
    landmark_map: LandmarkMap,
    params: MeasurementNoiseParams,
) -> float:
    if len(gated) == 0:
        return 0.0
    k = kappa.kappa if isinstance(kappa, AssociationWeights) else np.asarray(kappa, float)
    g, _ = association_factors(particle.as_array(), dets, gated, landmark_map, params)
    out = np.zeros(1)
    approx_loglik_kernel(g, np.ascontiguousarray(k), out)
    return float(out[0])


def gate_indices(
    landmark_map: LandmarkMap,
    mean: np.ndarray,
    cov: np.ndarray,
    r_max: float,
    gamma_gate: float,
) -> np.ndarray:
    if len(landmark_map) == 0:
        return np.zeros(0, dtype=np.int64)
    c00, c01, c11 = cov[0, 0], cov[0, 1], cov[1, 1]
    lmax = 0.5 * (c00 + c11) + math.sqrt(max(0.25 * (c00 - c11) ** 2 + c01 * c01, 0.0))
    radius = math.sqrt(gamma_gate * (max(lmax, 0.0) + (r_max + landmark_map.max_rho) ** 2))
    cand = landmark_map.window(mean[0], mean[1], radius)
    try:
        return gate_kernel(
            landmark_map.array, landmark_map.rho, cand, mean[0], mean[1],
            c00, c01, c11, r_max, gamma_gate,
        )
    except ZeroDivisionError as e:
        raise SingularCovariance(str(e)) from None


def gate(landmark_map: LandmarkMap, belief, r_max: float, gamma_gate: float = 6.6) -> GatedSet:
    """Landmarks inside the validation region of the belief.

    The position covariance is inflated by ``(r_max + rho_d)**2 * I`` where
    ``rho_d`` is the landmark half-diagonal, so the region reaches as far as
    the sonar can see.
    """
    if gamma_gate <= 0:
        raise ValueError("gamma_gate must be > 0")
    idx = gate_indices(landmark_map, np.asarray(belief.mean), np.asarray(belief.cov), r_max, gamma_gate)
    return GatedSet(tuple(int(i) for i in landmark_map.ids[idx]), gamma_gate, idx)
