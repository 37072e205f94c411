"""Motion and measurement models.

State transition follows the coordinated-turn model with noisy speed and
turn rate, an extra heading-rate noise and an additive altitude random
walk.  Sonar detections are pairs of signed slant ranges (near edge, far
edge); compass heading and altitude are scalar Gaussian measurements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from numba import njit

from .errors import NoCrossing, NonPositiveDt
from .geometry import Landmark, VehicleState, _wrap, crossing

# |v_t| below this uses the straight-line limit of the transition.
TURN_RATE_EPS = 1e-6

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ControlInput:
    speed: float
    turn_rate: float


@dataclass(frozen=True)
class DrivingNoiseParams:
    sigma_s: float = 0.0
    sigma_t: float = 0.0
    sigma_theta: float = 0.0
    sigma_gamma: float = 0.0

    def __post_init__(self):
        if min(self.as_array()) < 0:
            raise ValueError("driving noise standard deviations must be >= 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma_s, self.sigma_t, self.sigma_theta, self.sigma_gamma])


@dataclass(frozen=True)
class MeasurementNoiseParams:
    sigma_d: float = 0.75
    sigma_h: float = 0.25
    sigma_c: float = 0.1
    p_det: float = 0.95
    mu_c: float = 0.01
    r_max: float = 20.0
    clutter_model: str = "uniform"  # or "ordered"
    sigma_d_overrides: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.p_det <= 1.0:
            raise ValueError(f"p_det must lie in (0, 1], got {self.p_det}")
        if self.mu_c < 0:
            raise ValueError("mu_c must be >= 0")
        if min(self.sigma_d, self.sigma_h, self.sigma_c) < 0:
            raise ValueError("noise standard deviations must be >= 0")
        if self.r_max <= 0:
            raise ValueError("r_max must be > 0")
        if self.clutter_model not in ("uniform", "ordered"):
            raise ValueError(f"unknown clutter model {self.clutter_model!r}")

    def sigma_d_for(self, landmark_id: int) -> float:
        return self.sigma_d_overrides.get(landmark_id, self.sigma_d)

    @property
    def clutter_level(self) -> float:
        """Clutter density value inside its support."""
        base = 1.0 / (2.0 * self.r_max) ** 2
        return 2.0 * base if self.clutter_model == "ordered" else base


@dataclass(frozen=True)
class Detection:
    z1: float
    z2: float


@dataclass(frozen=True)
class DetectionSet:
    detections: tuple[Detection, ...]
    heading: float
    altitude: float
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))

    def __len__(self) -> int:
        return len(self.detections)

    def as_array(self) -> np.ndarray:
        if not self.detections:
            return np.zeros((0, 2))
        return np.array([(d.z1, d.z2) for d in self.detections], dtype=float)

    @classmethod
    def from_array(cls, z: np.ndarray, heading: float, altitude: float, timestamp=0.0):
        dets = tuple(Detection(float(a), float(b)) for a, b in np.asarray(z).reshape(-1, 2))
        return cls(dets, heading, altitude, timestamp)


# --------------------------------------------------------------------------
# kernels


@njit(cache=True)
def transition_kernel(x, y, th, gam, us, ut, ns, nt, nth, ngam, dt):
    vs = us + ns
    vt = ut + nt
    if abs(vt) < TURN_RATE_EPS:
        x1 = x + vs * dt * math.cos(th)
        y1 = y + vs * dt * math.sin(th)
    else:
        r = vs / vt
        th_end = th + vt * dt
        x1 = x - r * math.sin(th) + r * math.sin(th_end)
        y1 = y + r * math.cos(th) - r * math.cos(th_end)
    th1 = _wrap(th + vt * dt + nth * dt)
    gam1 = gam + ngam
    if gam1 < 0.0:
        gam1 = 0.0
    return x1, y1, th1, gam1


@njit(cache=True)
def aux_loglik_kernel(states, y_c, y_h, sigma_c, sigma_h, out):
    """Add compass and altitude log-likelihoods of each row of ``states`` to ``out``."""
    kc = -0.5 * LOG_2PI - math.log(sigma_c)
    kh = -0.5 * LOG_2PI - math.log(sigma_h)
    for i in range(states.shape[0]):
        rc = _wrap(y_c - states[i, 2]) / sigma_c
        rh = (y_h - states[i, 3]) / sigma_h
        out[i] += kc + kh - 0.5 * (rc * rc + rh * rh)


# --------------------------------------------------------------------------
# public operations


def transition(
    prev: VehicleState,
    u: ControlInput,
    n: Sequence[float],
    dt: float,
) -> VehicleState:
    """Propagate the state over ``dt`` seconds with driving noise draw ``n``.

    ``n`` is ``(n_s, n_t, n_theta, n_gamma)``.
    """
    if not dt > 0:
        raise NonPositiveDt(f"dt must be > 0, got {dt}")
    out = transition_kernel(
        prev.x, prev.y, prev.theta, prev.gamma,
        u.speed, u.turn_rate, n[0], n[1], n[2], n[3], dt,
    )
    return VehicleState(*out)


def sample_driving_noise(params: DrivingNoiseParams, rng: np.random.Generator, size=None):
    return rng.standard_normal(size=(4,) if size is None else (size, 4)) * params.as_array()


def detection_probability(
    state: VehicleState, m: Landmark, params: MeasurementNoiseParams
) -> float:
    return params.p_det if crossing(state, m, params.r_max) is not None else 0.0


def detection_likelihood(
    z: Detection, state: VehicleState, m: Landmark, params: MeasurementNoiseParams
) -> float:
    """Bivariate Gaussian density of a detection given its source landmark."""
    c = crossing(state, m, params.r_max)
    if c is None:
        raise NoCrossing(f"landmark {m.id} is outside the ping footprint")
    s = params.sigma_d_for(m.id)
    d1 = z.z1 - c.near_signed
    d2 = z.z2 - c.far_signed
    return math.exp(-0.5 * (d1 * d1 + d2 * d2) / (s * s)) / (2.0 * math.pi * s * s)


def clutter_density(z: Detection, params: MeasurementNoiseParams) -> float:
    """Clutter density: uniform over [-r_max, r_max] in each component.

    The ``ordered`` variant only supports ``|z1| <= |z2|`` and has twice
    the density there.
    """
    r = params.r_max
    if not (abs(z.z1) <= r and abs(z.z2) <= r):
        return 0.0
    if params.clutter_model == "ordered" and abs(z.z1) > abs(z.z2):
        return 0.0
    return params.clutter_level


def aux_log_likelihood(
    det: DetectionSet,
    state: VehicleState,
    params: MeasurementNoiseParams,
) -> float:
    """Log-density of the compass and altitude measurements.

    The heading residual is wrapped before it enters the Gaussian.
    """
    out = np.zeros(1)
    aux_loglik_kernel(
        state.as_array()[None, :], det.heading, det.altitude,
        params.sigma_c, params.sigma_h, out,
    )
    return float(out[0])
