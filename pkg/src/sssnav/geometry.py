"""Planar geometry of a side-scan sonar ping.

A ping covers a straight segment on the seafloor, perpendicular to the
vehicle heading, reaching ``sqrt(r_max**2 - gamma**2)`` to either side.
Landmarks are oriented rectangles.  The crossing of the ping segment with a
landmark gives the near/far edge points and their slant ranges.

Conventions: angles are radians measured counter-clockwise from east and
wrapped to (-pi, pi]; the port side is to the left of the heading and port
slant ranges are reported as negative numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from numba import njit

from .errors import AltitudeExceedsRange, InvalidLandmark

Point = tuple[float, float]

# Half-size inflation used by the clipping test so that a footprint grazing
# an edge or corner counts as touching it.
EDGE_EPS = 1e-12


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return _wrap(a)


@njit(cache=True)
def _wrap(a):
    if -math.pi < a <= math.pi:
        return a
    two_pi = 2.0 * math.pi
    a = a - two_pi * math.floor((a + math.pi) / two_pi)
    if a <= -math.pi:
        a += two_pi
    return a


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    theta: float
    gamma: float

    def __post_init__(self):
        if not self.gamma >= 0.0:
            raise ValueError(f"altitude must be >= 0, got {self.gamma}")
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @property
    def position(self) -> Point:
        return (self.x, self.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.gamma])

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "VehicleState":
        return cls(float(a[0]), float(a[1]), float(a[2]), max(float(a[3]), 0.0))


@dataclass(frozen=True)
class Landmark:
    id: int
    x: float
    y: float
    theta: float
    l: float
    w: float

    def __post_init__(self):
        if not (self.l > 0.0 and self.w > 0.0):
            raise InvalidLandmark(f"landmark {self.id}: length and width must be > 0")
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @property
    def half_diagonal(self) -> float:
        return 0.5 * math.hypot(self.l, self.w)

    def as_array(self) -> np.ndarray:
        """``[x, y, theta, l/2, w/2]``, the layout used by the compiled kernels."""
        return np.array([self.x, self.y, self.theta, 0.5 * self.l, 0.5 * self.w])


@dataclass(frozen=True)
class PingFootprint:
    port_end: Point
    starboard_end: Point
    vehicle_position: Point
    altitude: float
    r_max: float


@dataclass(frozen=True)
class LandmarkCrossing:
    landmark_id: int
    near_point: Point
    far_point: Point
    near_range: float
    far_range: float
    near_signed: float
    far_signed: float

    @property
    def signed_ranges(self) -> tuple[float, float]:
        return (self.near_signed, self.far_signed)


class LandmarkMap:
    """An immutable collection of landmarks with a cheap spatial lookup.

    Landmarks are kept sorted by x so that a query for everything within a
    square window only touches a slab of the map.
    """

    def __init__(self, landmarks: Iterable[Landmark]):
        lms = sorted(landmarks, key=lambda m: (m.x, m.id))
        ids = [m.id for m in lms]
        if len(set(ids)) != len(ids):
            raise InvalidLandmark("landmark ids must be unique within a map")
        self.landmarks: tuple[Landmark, ...] = tuple(lms)
        self.ids = np.array(ids, dtype=np.int64)
        self.array = (
            np.array([m.as_array() for m in lms]) if lms else np.zeros((0, 5))
        )
        self.rho = np.array([m.half_diagonal for m in lms]) if lms else np.zeros(0)
        self.max_rho = float(self.rho.max()) if lms else 0.0
        self._by_id = {m.id: i for i, m in enumerate(lms)}

    def __len__(self) -> int:
        return len(self.landmarks)

    def __iter__(self):
        return iter(self.landmarks)

    def __getitem__(self, landmark_id: int) -> Landmark:
        return self.landmarks[self._by_id[landmark_id]]

    def index_of(self, landmark_id: int) -> int:
        return self._by_id[landmark_id]

    def window(self, cx: float, cy: float, radius: float) -> np.ndarray:
        """Row indices of landmarks whose centers lie in the square window."""
        return _window(self.array, cx, cy, radius)


@njit(cache=True)
def _window(arr, cx, cy, radius):
    n = arr.shape[0]
    out = np.empty(n, dtype=np.int64)
    if n == 0:
        return out[:0]
    lo = np.searchsorted(arr[:, 0], cx - radius, side="left")
    hi = np.searchsorted(arr[:, 0], cx + radius, side="right")
    k = 0
    for i in range(lo, hi):
        if abs(arr[i, 1] - cy) <= radius:
            out[k] = i
            k += 1
    return out[:k]


# --------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _footprint_reach(gamma, r_max):
    return math.sqrt(r_max * r_max - gamma * gamma)


@njit(cache=True)
def _clip(px, py, th, gam, cx, cy, cth, hl, hw, r_max):
    """Clip the port->starboard footprint segment against a rectangle.

    Returns ``(t0, t1, reach)``; the footprint point at parameter t is
    ``port_end + t * (starboard_end - port_end)``.  ``t0 > t1`` means the
    segment misses the rectangle.
    """
    if gam >= r_max:
        return 1.0, 0.0, 0.0
    reach = _footprint_reach(gam, r_max)
    lx = -math.sin(th)
    ly = math.cos(th)
    ax = px + lx * reach
    ay = py + ly * reach
    dx = -2.0 * reach * lx
    dy = -2.0 * reach * ly
    c = math.cos(cth)
    s = math.sin(cth)
    rx = ax - cx
    ry = ay - cy
    u0 = c * rx + s * ry
    v0 = -s * rx + c * ry
    du = c * dx + s * dy
    dv = -s * dx + c * dy
    hl = hl + EDGE_EPS
    hw = hw + EDGE_EPS
    t0 = 0.0
    t1 = 1.0
    for k in range(4):
        if k == 0:
            p = -du
            q = u0 + hl
        elif k == 1:
            p = du
            q = hl - u0
        elif k == 2:
            p = -dv
            q = v0 + hw
        else:
            p = dv
            q = hw - v0
        if p == 0.0:
            if q < 0.0:
                return 1.0, 0.0, reach
        else:
            r = q / p
            if p < 0.0:
                if r > t0:
                    t0 = r
            else:
                if r < t1:
                    t1 = r
        if t0 > t1:
            return t0, t1, reach
    return t0, t1, reach


@njit(cache=True)
def crossing_kernel(px, py, th, gam, cx, cy, cth, hl, hw, r_max):
    """Scalar crossing evaluation shared by the filter and the simulator.

    Returns ``(hit, t_near, t_far, near_signed, far_signed)``.
    """
    t0, t1, reach = _clip(px, py, th, gam, cx, cy, cth, hl, hw, r_max)
    if t0 > t1:
        return False, 0.0, 0.0, 0.0, 0.0
    if t1 <= 0.5:
        t_near = t1
        t_far = t0
        sign = -1.0
    elif t0 >= 0.5:
        t_near = t0
        t_far = t1
        sign = 1.0
    else:
        # rectangle straddles the nadir: near point is directly below the
        # vehicle, far point on the side with the larger extent
        t_near = 0.5
        if 0.5 - t0 > t1 - 0.5:
            t_far = t0
            sign = -1.0
        else:
            t_far = t1
            sign = 1.0
    h_near = abs(t_near - 0.5) * 2.0 * reach
    h_far = abs(t_far - 0.5) * 2.0 * reach
    g2 = gam * gam
    r_near = min(math.sqrt(h_near * h_near + g2), r_max)
    r_far = min(math.sqrt(h_far * h_far + g2), r_max)
    return True, t_near, t_far, sign * r_near, sign * r_far


# --------------------------------------------------------------------------
# public operations


def _check_altitude(state: VehicleState, r_max: float) -> None:
    if not state.gamma < r_max:
        raise AltitudeExceedsRange(
            f"altitude {state.gamma} m is not below max slant range {r_max} m"
        )


def ping_footprint(state: VehicleState, r_max: float) -> PingFootprint:
    _check_altitude(state, r_max)
    reach = math.sqrt(r_max**2 - state.gamma**2)
    ox = math.cos(state.theta + math.pi / 2) * reach
    oy = math.sin(state.theta + math.pi / 2) * reach
    return PingFootprint(
        port_end=(state.x + ox, state.y + oy),
        starboard_end=(state.x - ox, state.y - oy),
        vehicle_position=(state.x, state.y),
        altitude=state.gamma,
        r_max=r_max,
    )


def landmark_corners(m: Landmark) -> list[Point]:
    """Corners in counter-clockwise order, starting at the (-l, -w) corner."""
    c, s = math.cos(m.theta), math.sin(m.theta)
    out = []
    for a, b in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
        u, v = a * m.l / 2, b * m.w / 2
        out.append((m.x + c * u - s * v, m.y + s * u + c * v))
    return out


def landmark_edges(m: Landmark) -> list[tuple[Point, Point]]:
    """The four boundary segments of the landmark rectangle.

    The length axis points along ``theta`` and the width axis across it.
    """
    cs = landmark_corners(m)
    return [(cs[i], cs[(i + 1) % 4]) for i in range(4)]


def crossing(
    state: VehicleState, m: Landmark, r_max: float
) -> Optional[LandmarkCrossing]:
    """Intersect the ping footprint with a landmark.

    Returns ``None`` when the footprint misses the landmark.  Otherwise the
    near and far crossing points, ordered by slant range.  When the landmark
    extends past the end of the footprint the far point is the footprint end
    (slant range ``r_max``).  When the vehicle is directly above the landmark
    the near point is the nadir (slant range ``gamma``).
    """
    _check_altitude(state, r_max)
    hit, t_near, t_far, s_near, s_far = crossing_kernel(
        state.x, state.y, state.theta, state.gamma,
        m.x, m.y, m.theta, 0.5 * m.l, 0.5 * m.w, r_max,
    )
    if not hit:
        return None
    fp = ping_footprint(state, r_max)
    (ax, ay), (bx, by) = fp.port_end, fp.starboard_end

    def at(t):
        return (ax + t * (bx - ax), ay + t * (by - ay))

    return LandmarkCrossing(
        landmark_id=m.id,
        near_point=at(t_near),
        far_point=at(t_far),
        near_range=abs(s_near),
        far_range=abs(s_far),
        near_signed=s_near,
        far_signed=s_far,
    )


def side_sign(state: VehicleState, point: Point) -> float:
    """-1 for a point on the port side, +1 for starboard, 0 on the track line."""
    hx, hy = math.cos(state.theta), math.sin(state.theta)
    cross = hx * (point[1] - state.y) - hy * (point[0] - state.x)
    return -float(np.sign(cross))
