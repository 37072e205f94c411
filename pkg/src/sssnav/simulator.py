"""Forward simulation of vehicle motion and side-scan sonar detections.

Truth follows the same transition model as the filter, driven by sampled
driving noise, plus an optional water-current displacement with a fixed
direction per run and a Gaussian per-step speed.  Detections are the signed
crossing ranges of every landmark in the ping footprint, kept with
probability ``p_det`` and perturbed by Gaussian noise, mixed with Poisson
clutter.

Each run draws from three independent random streams derived from
``(seed, run_index)``: motion, sensing and (shared by all runs) the map.
Truth trajectories therefore do not depend on the landmark layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .errors import ConfigError
from .filter import StepData
from .geometry import Landmark, LandmarkMap, VehicleState, _wrap, crossing_kernel
from .models import (
    Detection,
    DetectionSet,
    DrivingNoiseParams,
    MeasurementNoiseParams,
    transition_kernel,
)

STREAM_MOTION = 1
STREAM_SENSING = 2
STREAM_MAP = 3

POLICIES = ("random", "lawnmower", "scripted")


@dataclass(frozen=True)
class ScenarioConfig:
    duration: float = 600.0
    ping_rate: float = 30.0
    seed: int = 0
    # landmark layout: explicit list, or a square grid of the given spacing
    landmarks: Optional[tuple[Landmark, ...]] = None
    grid_spacing: Optional[float] = None
    grid_extent: float = 800.0
    landmark_length: float = 2.0
    landmark_width: float = 1.0
    landmark_orientation: Optional[float] = None  # None: uniform random
    initial_state: VehicleState = VehicleState(0.0, 0.0, 0.0, 5.0)
    policy: str = "random"
    # random-turn policy
    hold: float = 10.0
    speed_range: tuple[float, float] = (0.5, 2.0)
    turn_range: tuple[float, float] = (-0.2, 0.2)
    # lawnmower policy
    leg_length: float = 200.0
    leg_spacing: float = 30.0
    legs: int = 6
    speed: float = 1.5
    max_turn_rate: float = 0.2
    # scripted policy: (duration, speed, turn_rate) segments
    segments: tuple[tuple[float, float, float], ...] = ()
    current_mean: float = 0.0
    current_std: float = 0.0
    driving: DrivingNoiseParams = field(default_factory=DrivingNoiseParams)
    measurement: MeasurementNoiseParams = field(default_factory=MeasurementNoiseParams)

    def __post_init__(self):
        if not self.duration > 0:
            raise ConfigError("duration must be > 0")
        if not self.ping_rate > 0:
            raise ConfigError("ping_rate must be > 0")
        if self.grid_spacing is not None and not self.grid_spacing > 0:
            raise ConfigError("grid_spacing must be > 0")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.policy == "scripted" and not self.segments:
            raise ConfigError("scripted policy needs at least one segment")
        if self.current_std < 0:
            raise ConfigError("current_std must be >= 0")
        if not self.initial_state.gamma < self.measurement.r_max:
            raise ConfigError("initial altitude must be below r_max")

    @property
    def dt(self) -> float:
        return 1.0 / self.ping_rate

    @property
    def n_steps(self) -> int:
        return max(1, math.ceil(self.ping_rate * self.duration - 1e-9))


@dataclass
class GroundTruthRun:
    """A simulated run.  Row 0 holds the initial state and carries no detections."""

    t: np.ndarray
    states: np.ndarray  # (K, 4)
    controls: np.ndarray  # (K, 2)
    y_c: np.ndarray
    y_h: np.ndarray
    det_offsets: np.ndarray
    det_values: np.ndarray
    n_true: np.ndarray  # true (non-clutter) detections per step
    current_heading: float = 0.0

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def observation_frequency(self) -> float:
        """Fraction of pings with at least one true landmark detection."""
        return float(np.mean(self.n_true[1:] > 0))

    def detections(self, k: int) -> DetectionSet:
        z = self.det_values[self.det_offsets[k]:self.det_offsets[k + 1]]
        return DetectionSet.from_array(z, self.y_c[k], self.y_h[k], self.t[k])

    def step_data(self) -> StepData:
        return StepData(self.t, self.controls, self.y_c, self.y_h, self.det_offsets, self.det_values)


# --------------------------------------------------------------------------
# map construction


def grid_landmarks(cfg: ScenarioConfig) -> list[Landmark]:
    if cfg.grid_spacing is None:
        return []
    s = cfg.grid_spacing
    n = int(math.floor(cfg.grid_extent / s))
    coords = (np.arange(-n, n) + 0.5) * s
    rng = np.random.default_rng([cfg.seed, STREAM_MAP])
    out = []
    for i, x in enumerate(coords):
        for j, y in enumerate(coords):
            if cfg.landmark_orientation is None:
                th = rng.uniform(-math.pi, math.pi)
            else:
                th = cfg.landmark_orientation
            out.append(Landmark(len(out), float(x), float(y), th, cfg.landmark_length, cfg.landmark_width))
    return out


def build_map(cfg: ScenarioConfig) -> LandmarkMap:
    if cfg.landmarks is not None:
        return LandmarkMap(cfg.landmarks)
    return LandmarkMap(grid_landmarks(cfg))


# --------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _truth_kernel(init, controls, policy, waypoints, speed, max_turn, noise, cur_speed, cur_dir, dt):
    K = controls.shape[0]
    states = np.empty((K, 4))
    used = controls.copy()
    states[0] = init
    wp = 0
    cdx = math.cos(cur_dir)
    cdy = math.sin(cur_dir)
    for k in range(1, K):
        s = states[k - 1]
        if policy == 1:
            tx = waypoints[wp, 0]
            ty = waypoints[wp, 1]
            if math.hypot(tx - s[0], ty - s[1]) < 5.0:
                wp = (wp + 1) % waypoints.shape[0]
                tx = waypoints[wp, 0]
                ty = waypoints[wp, 1]
            err = _wrap(math.atan2(ty - s[1], tx - s[0]) - s[2])
            ut = min(max(err, -max_turn), max_turn)
            used[k, 0] = speed
            used[k, 1] = ut
        x, y, th, g = transition_kernel(
            s[0], s[1], s[2], s[3], used[k, 0], used[k, 1],
            noise[k, 0], noise[k, 1], noise[k, 2], noise[k, 3], dt,
        )
        states[k, 0] = x + cur_speed[k] * dt * cdx
        states[k, 1] = y + cur_speed[k] * dt * cdy
        states[k, 2] = th
        states[k, 3] = g
    return states, used


@njit(cache=True)
def _visible_kernel(states, arr, max_rho, r_max):
    """All (step, landmark row, near_signed, far_signed) crossings of a run."""
    K = states.shape[0]
    cap = 1024
    steps = np.empty(cap, dtype=np.int64)
    rows = np.empty(cap, dtype=np.int64)
    zs = np.empty((cap, 2))
    n = 0
    xs = arr[:, 0]
    for k in range(1, K):
        px = states[k, 0]
        py = states[k, 1]
        rad = r_max + max_rho
        lo = np.searchsorted(xs, px - rad, side="left")
        hi = np.searchsorted(xs, px + rad, side="right")
        for i in range(lo, hi):
            if abs(arr[i, 1] - py) > rad:
                continue
            hit, tn, tf, zn, zf = crossing_kernel(
                px, py, states[k, 2], states[k, 3],
                arr[i, 0], arr[i, 1], arr[i, 2], arr[i, 3], arr[i, 4], r_max,
            )
            if not hit:
                continue
            if n == cap:
                cap *= 2
                steps2 = np.empty(cap, dtype=np.int64)
                rows2 = np.empty(cap, dtype=np.int64)
                zs2 = np.empty((cap, 2))
                steps2[:n] = steps[:n]
                rows2[:n] = rows[:n]
                zs2[:n] = zs[:n]
                steps, rows, zs = steps2, rows2, zs2
            steps[n] = k
            rows[n] = i
            zs[n, 0] = zn
            zs[n, 1] = zf
            n += 1
    return steps[:n], rows[:n], zs[:n]


# --------------------------------------------------------------------------
# policies


def lawnmower_waypoints(cfg: ScenarioConfig) -> np.ndarray:
    x0, y0 = cfg.initial_state.x, cfg.initial_state.y
    pts = []
    for i in range(cfg.legs):
        y = y0 + i * cfg.leg_spacing
        a, b = (x0, x0 + cfg.leg_length) if i % 2 == 0 else (x0 + cfg.leg_length, x0)
        pts += [(a, y), (b, y)]
    return np.array(pts, dtype=float)


def _open_loop_controls(cfg: ScenarioConfig, K: int, rng: np.random.Generator) -> np.ndarray:
    controls = np.zeros((K, 2))
    if cfg.policy == "random":
        per = max(1, int(round(cfg.hold * cfg.ping_rate)))
        nseg = (K - 1) // per + 1
        sp = rng.uniform(*cfg.speed_range, size=nseg)
        tr = rng.uniform(*cfg.turn_range, size=nseg)
        seg = np.arange(K - 1) // per
        controls[1:, 0] = sp[seg]
        controls[1:, 1] = tr[seg]
    elif cfg.policy == "scripted":
        t = np.arange(1, K) * cfg.dt
        ends = np.cumsum([s[0] for s in cfg.segments])
        seg = np.minimum(np.searchsorted(ends, t - 1e-12, side="left"), len(cfg.segments) - 1)
        controls[1:, 0] = [cfg.segments[i][1] for i in seg]
        controls[1:, 1] = [cfg.segments[i][2] for i in seg]
    return controls


# --------------------------------------------------------------------------
# public operations


def sample_current_speed(cfg: ScenarioConfig, rng: np.random.Generator, size=None):
    v = rng.normal(cfg.current_mean, cfg.current_std, size=size)
    return np.maximum(v, 0.0)


def propagate_truth(
    state: VehicleState,
    u,
    scenario: ScenarioConfig,
    rng: np.random.Generator,
    current_heading: float = 0.0,
) -> VehicleState:
    """One truth step: noisy transition followed by the current displacement."""
    n = rng.standard_normal(4) * scenario.driving.as_array()
    x, y, th, g = transition_kernel(
        state.x, state.y, state.theta, state.gamma,
        u.speed, u.turn_rate, n[0], n[1], n[2], n[3], scenario.dt,
    )
    v = float(sample_current_speed(scenario, rng))
    x += v * scenario.dt * math.cos(current_heading)
    y += v * scenario.dt * math.sin(current_heading)
    return VehicleState(x, y, th, g)


def _clutter(mu_c: float, r_max: float, count: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.uniform(-r_max, r_max, size=(count, 2))
    swap = np.abs(z[:, 0]) > np.abs(z[:, 1])
    z[swap] = z[swap][:, ::-1]
    return z


def synth_detections(
    state: VehicleState,
    landmark_map: LandmarkMap,
    params: MeasurementNoiseParams,
    rng: np.random.Generator,
    timestamp: float = 0.0,
) -> DetectionSet:
    """Simulate the measurements of a single ping."""
    rows = landmark_map.window(state.x, state.y, params.r_max + landmark_map.max_rho)
    z = []
    for i in rows:
        m = landmark_map.array[i]
        hit, _, _, zn, zf = crossing_kernel(
            state.x, state.y, state.theta, state.gamma, m[0], m[1], m[2], m[3], m[4], params.r_max
        )
        if hit and rng.random() < params.p_det:
            s = params.sigma_d_for(int(landmark_map.ids[i]))
            z.append((zn + s * rng.standard_normal(), zf + s * rng.standard_normal()))
    n_clutter = rng.poisson(params.mu_c)
    z += [tuple(r) for r in _clutter(params.mu_c, params.r_max, n_clutter, rng)]
    order = rng.permutation(len(z))
    dets = tuple(Detection(*z[i]) for i in order)
    y_c = _wrap(state.theta + params.sigma_c * rng.standard_normal())
    y_h = state.gamma + params.sigma_h * rng.standard_normal()
    return DetectionSet(dets, y_c, y_h, timestamp)


def run_scenario(
    cfg: ScenarioConfig,
    run_index: int = 0,
    landmark_map: Optional[LandmarkMap] = None,
) -> GroundTruthRun:
    """Simulate one run of the scenario.

    ``landmark_map`` may be passed to avoid rebuilding the same map for
    every run of a Monte Carlo batch.
    """
    if landmark_map is None:
        landmark_map = build_map(cfg)
    K = cfg.n_steps + 1
    dt = cfg.dt
    motion = np.random.default_rng([cfg.seed, run_index, STREAM_MOTION])
    sensing = np.random.default_rng([cfg.seed, run_index, STREAM_SENSING])

    controls = _open_loop_controls(cfg, K, motion)
    noise = motion.standard_normal((K, 4)) * cfg.driving.as_array()
    cur_dir = float(motion.uniform(-math.pi, math.pi))
    cur_speed = sample_current_speed(cfg, motion, size=K)
    policy = 1 if cfg.policy == "lawnmower" else 0
    wps = lawnmower_waypoints(cfg) if policy == 1 else np.zeros((1, 2))
    states, controls = _truth_kernel(
        cfg.initial_state.as_array(), controls, policy, wps, cfg.speed,
        cfg.max_turn_rate, noise, cur_speed, cur_dir, dt,
    )

    p = cfg.measurement
    if len(landmark_map):
        steps, rows, z = _visible_kernel(states, landmark_map.array, landmark_map.max_rho, p.r_max)
    else:
        steps, rows, z = np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2))
    keep = sensing.random(steps.shape[0]) < p.p_det
    sig = np.array([p.sigma_d_for(int(i)) for i in landmark_map.ids[rows]]) if rows.size else np.zeros(0)
    z = z + sig[:, None] * sensing.standard_normal(z.shape)
    steps, z = steps[keep], z[keep]
    n_true = np.bincount(steps, minlength=K)

    n_clutter = sensing.poisson(p.mu_c, size=K)
    n_clutter[0] = 0
    cz = _clutter(p.mu_c, p.r_max, int(n_clutter.sum()), sensing)
    csteps = np.repeat(np.arange(K), n_clutter)

    all_steps = np.concatenate([steps, csteps])
    all_z = np.concatenate([z, cz])
    order = np.argsort(all_steps, kind="stable")
    all_steps, all_z = all_steps[order], all_z[order]
    counts = np.bincount(all_steps, minlength=K)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    for k in np.flatnonzero(counts > 1):
        a, b = offsets[k], offsets[k + 1]
        all_z[a:b] = all_z[a:b][sensing.permutation(b - a)]

    y_c = np.array([_wrap(v) for v in states[:, 2] + p.sigma_c * sensing.standard_normal(K)])
    y_h = states[:, 3] + p.sigma_h * sensing.standard_normal(K)
    t = np.arange(K) * dt
    return GroundTruthRun(t, states, controls, y_c, y_h, offsets, all_z, n_true, cur_dir)
