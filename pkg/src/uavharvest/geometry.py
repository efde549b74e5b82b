"""Exact geometric predicates for cuboid buildings and sight segments.

All buildings are axis-aligned cuboids grounded at z = 0. Intersection
tests use *open* interior semantics: a segment that only grazes a face,
edge, or corner does not count as intersecting. These predicates serve
both as constraints inside the optimizer and as the independent oracle
that certifies final plans.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

# Inflating each half-dimension of a cuboid by len/(2*sqrt(2)) guarantees
# that a segment of length <= len whose endpoints (at z >= 0) lie outside
# the inflated cuboid cannot reach the original cuboid's interior.
INFLATION_FACTOR = 1.0 / (2.0 * np.sqrt(2.0))


class ChannelState(Enum):
    LOS = "los"
    NLOS = "nlos"


@dataclass(frozen=True)
class Building:
    """Axis-aligned cuboid grounded at z = 0.

    `center` is the footprint center (its z component must be 0); the
    cuboid spans width along x, length along y, and [0, height] along z.
    """

    center: tuple[float, float, float]
    width: float
    length: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.length > 0 and self.height > 0):
            raise ValueError("building dimensions must be positive")
        if abs(self.center[2]) != 0.0:
            raise ValueError("building center must lie on the ground plane (z = 0)")

    @property
    def half_width(self) -> float:
        return 0.5 * self.width

    @property
    def half_length(self) -> float:
        return 0.5 * self.length

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """(lo, hi) corners of the closed cuboid."""
        cx, cy, _ = self.center
        lo = np.array([cx - self.half_width, cy - self.half_length, 0.0])
        hi = np.array([cx + self.half_width, cy + self.half_length, self.height])
        return lo, hi

    def min_dimension(self) -> float:
        return min(self.width, self.length, self.height)


@dataclass(frozen=True)
class ExpandedBuilding:
    """A building inflated by `margin` in half-width, half-length and height."""

    base: Building
    margin: float

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("expansion margin must be positive")

    @property
    def half_width(self) -> float:
        return self.base.half_width + self.margin

    @property
    def half_length(self) -> float:
        return self.base.half_length + self.margin

    @property
    def height(self) -> float:
        return self.base.height + self.margin

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        cx, cy, _ = self.base.center
        lo = np.array([cx - self.half_width, cy - self.half_length, 0.0])
        hi = np.array([cx + self.half_width, cy + self.half_length, self.height])
        return lo, hi


@dataclass(frozen=True)
class Segment3:
    """Straight segment between two 3D points."""

    a: tuple[float, float, float]
    b: tuple[float, float, float]

    def __post_init__(self):
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b))):
            raise ValueError("segment endpoints must be finite")

    def length(self) -> float:
        return float(np.linalg.norm(np.subtract(self.b, self.a)))


def expand_building(b: Building, d_max: float) -> ExpandedBuilding:
    """Inflate `b` so that short segments outside the result miss `b`.

    Valid for segment lengths up to d_max, which must be smaller than
    every dimension of the building.
    """
    if not (0.0 < d_max < b.min_dimension()):
        raise ValueError(
            f"d_max={d_max} must lie in (0, {b.min_dimension()}) for this building"
        )
    return ExpandedBuilding(base=b, margin=d_max * INFLATION_FACTOR)


def segment_point(seg: Segment3, t: float) -> np.ndarray:
    """Point a + (b - a) * t for t in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation parameter t={t} outside [0, 1]")
    a = np.asarray(seg.a, dtype=float)
    b = np.asarray(seg.b, dtype=float)
    return a + (b - a) * t


def segment_samples(seg: Segment3, num_segments: int) -> np.ndarray:
    """(num_segments + 1, 3) equally spaced points from a to b inclusive."""
    if num_segments < 1:
        raise ValueError("number of subdivisions must be >= 1")
    a = np.asarray(seg.a, dtype=float)
    b = np.asarray(seg.b, dtype=float)
    u = np.arange(num_segments + 1, dtype=float)[:, None] / num_segments
    return a + (b - a) * u


def _slab_interval(a: float, d: float, lo: float, hi: float) -> tuple[float, float] | None:
    """Open t-interval where a + t*d lies strictly between lo and hi.

    Returns None when the interval is empty. For d == 0 the interval is
    (-inf, inf) if a is strictly inside the slab, else empty.
    """
    if d == 0.0:
        return (-np.inf, np.inf) if lo < a < hi else None
    t1 = (lo - a) / d
    t2 = (hi - a) / d
    return (t1, t2) if t1 <= t2 else (t2, t1)


def segment_intersects_interior(seg: Segment3, box: Building | ExpandedBuilding) -> bool:
    """True iff the segment meets the *open* interior of the cuboid.

    Slab method: intersect the open per-axis parameter intervals with the
    closed [0, 1] segment range. Grazing contact (touching faces, edges,
    or corners only) yields False.
    """
    lo, hi = box.bounds()
    a = np.asarray(seg.a, dtype=float)
    d = np.asarray(seg.b, dtype=float) - a

    t_lo, t_hi = 0.0, 1.0
    for i in range(3):
        interval = _slab_interval(a[i], d[i], lo[i], hi[i])
        if interval is None:
            return False
        t_lo = max(t_lo, interval[0])
        t_hi = min(t_hi, interval[1])
    # Each axis contributes an open interval, so a touching point
    # (t_lo == t_hi) never lies in the interior.
    return t_lo < t_hi


def segments_intersect_interior_batch(
    a: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray
) -> np.ndarray:
    """Vectorized slab test: a, b are (n, 3); lo, hi are (3,) or (n, 3).

    Same open-interior semantics as segment_intersects_interior; the two
    implementations are cross-checked in the test suite.
    """
    a = np.asarray(a, dtype=float)
    d = np.asarray(b, dtype=float) - a
    lo = np.broadcast_to(np.asarray(lo, dtype=float), a.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), a.shape)

    zero = d == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - a) / d
        t2 = (hi - a) / d
    t_min = np.minimum(t1, t2)
    t_max = np.maximum(t1, t2)
    inside_slab = (lo < a) & (a < hi)
    # Degenerate axes: interval is all of R when strictly inside, empty otherwise.
    t_min = np.where(zero, np.where(inside_slab, -np.inf, np.inf), t_min)
    t_max = np.where(zero, np.where(inside_slab, np.inf, -np.inf), t_max)

    t_lo = np.maximum(t_min.max(axis=1), 0.0)
    t_hi = np.minimum(t_max.min(axis=1), 1.0)
    return t_lo < t_hi


def point_strictly_inside(box: Building | ExpandedBuilding, p: np.ndarray) -> bool:
    """True iff p lies in the open interior of the cuboid."""
    lo, hi = box.bounds()
    p = np.asarray(p, dtype=float)
    return bool(np.all(lo < p) and np.all(p < hi))


def closest_point_on_expanded(box: ExpandedBuilding, q: np.ndarray) -> np.ndarray:
    """Closest point of the closed expanded cuboid to an exterior point q.

    For an axis-aligned cuboid this is the componentwise clamp of q onto
    the box. q strictly inside the cuboid signals a broken invariant
    upstream (iterates must stay outside) and raises.
    """
    q = np.asarray(q, dtype=float)
    if point_strictly_inside(box, q):
        raise ValueError("query point lies strictly inside the expanded building")
    lo, hi = box.bounds()
    return np.clip(q, lo, hi)


def hyperplane_margin(q_prev: np.ndarray, chi: np.ndarray, q: np.ndarray) -> float:
    """Signed margin (q_prev - chi) . (q - chi) of the separating plane.

    chi is a boundary point of a convex obstacle closest to q_prev; the
    half-space {margin >= 0} contains q_prev and excludes the obstacle's
    interior. Units are m^2.
    """
    q_prev = np.asarray(q_prev, dtype=float)
    chi = np.asarray(chi, dtype=float)
    normal = q_prev - chi
    if np.all(normal == 0.0):
        raise ValueError("degenerate separating plane: q_prev coincides with chi")
    return float(normal @ (np.asarray(q, dtype=float) - chi))


def true_channel_state(
    q: np.ndarray, w: np.ndarray, buildings: list[Building]
) -> ChannelState:
    """Ground-truth LoS/NLoS state of the sight segment q -> w.

    NLoS iff the open interior of any building intersects the segment.
    This is the oracle used for realized-rate reporting and plan
    verification; it never depends on any relaxation.
    """
    q = np.asarray(q, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.array_equal(q, w):
        raise ValueError("channel endpoints coincide")
    seg = Segment3(tuple(q), tuple(w))
    for b in buildings:
        if segment_intersects_interior(seg, b):
            return ChannelState.NLOS
    return ChannelState.LOS


def channel_states_batch(
    q: np.ndarray, gns: np.ndarray, buildings: list[Building]
) -> np.ndarray:
    """LoS mask for every (UAV position, GN) pair.

    q is (n, 3), gns is (k, 3); returns a boolean (k, n) array that is
    True where the sight segment is LoS.
    """
    q = np.asarray(q, dtype=float)
    gns = np.asarray(gns, dtype=float)
    n = q.shape[0]
    k = gns.shape[0]
    los = np.ones((k, n), dtype=bool)
    if not buildings:
        return los
    a = np.repeat(gns, n, axis=0)  # (k*n, 3)
    b = np.tile(q, (k, 1))
    for bld in buildings:
        lo, hi = bld.bounds()
        hit = segments_intersect_interior_batch(a, b, lo, hi)
        los &= ~hit.reshape(k, n)
    return los
