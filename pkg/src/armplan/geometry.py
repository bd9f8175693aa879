"""Segment vs. axis-aligned-box geometry: slab intersection, overlap length, clearance.

Boxes may optionally carry a rigid frame mapping world coordinates into the
box's own axis-aligned coordinates, which makes oriented boxes expressible
without changing the slab math.  All functions are pure and operate on
float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def vec3(x: float, y: float, z: float) -> np.ndarray:
    """Build a finite (3,) float vector."""
    v = np.array([x, y, z], dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite vector: {v}")
    return v


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite vector: {a}")
    return a


@dataclass(frozen=True)
class Segment:
    """Line segment between two points, zero length permitted."""

    start: np.ndarray
    end: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "start", _as_vec3(self.start))
        object.__setattr__(self, "end", _as_vec3(self.end))

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))


@dataclass(frozen=True)
class BoxFrame:
    """Rigid transform taking world coordinates into box coordinates.

    p_box = rotation @ p_world + translation.  rotation must be proper
    orthonormal (det +1).
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = _as_vec3(self.translation)
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("frame rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("frame rotation is not proper (det != +1)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def apply(self, p: np.ndarray) -> np.ndarray:
        return self.rotation @ p + self.translation


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box [lo, hi], optionally axis-aligned in its own frame."""

    lo: np.ndarray
    hi: np.ndarray
    frame: BoxFrame | None = None

    def __post_init__(self):
        lo = _as_vec3(self.lo)
        hi = _as_vec3(self.hi)
        if np.any(lo > hi):
            raise ValueError(f"box min {lo} exceeds max {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)


def expand_box(box: Aabb, margin: float) -> Aabb:
    """Grow the box by `margin` on every face; the frame is unchanged."""
    margin = float(margin)
    if not np.isfinite(margin) or margin < 0.0:
        raise ValueError(f"margin must be finite and non-negative, got {margin}")
    return Aabb(box.lo - margin, box.hi + margin, box.frame)


def to_box_frame(seg: Segment, box: Aabb) -> Segment:
    """Express a world-frame segment in the box's own coordinates."""
    if box.frame is None:
        return seg
    return Segment(box.frame.apply(seg.start), box.frame.apply(seg.end))


def _axis_lambdas(s, d, lo, hi):
    """Per-axis slab entry/exit parameters, broadcasting over inputs.

    Zero direction components get signed infinities: the axis constrains
    nothing when the fixed coordinate lies inside the slab, and forbids
    intersection otherwise.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - s) / d
        t2 = (hi - s) / d
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    parallel = d == 0.0
    if np.any(parallel):
        inside = (s >= lo) & (s <= hi)
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
    return near, far


def slab_lambdas(seg: Segment, box: Aabb) -> tuple[float, float]:
    """Clamped entry/exit parameters of the segment through the box slabs.

    The segment must already be expressed in the box frame (see
    `to_box_frame`).  Returns (lam_near, lam_far); the segment meets the
    box iff lam_near <= lam_far.
    """
    near, far = _axis_lambdas(seg.start, seg.end - seg.start, box.lo, box.hi)
    lam_near = max(float(np.max(near)), 0.0)
    lam_far = min(float(np.min(far)), 1.0)
    return lam_near, lam_far


def segment_intersects_box(seg: Segment, box: Aabb) -> bool:
    """True iff the segment meets the (solid) box."""
    lam_near, lam_far = slab_lambdas(to_box_frame(seg, box), box)
    return lam_near <= lam_far


def overlap_length(seg: Segment, box: Aabb) -> float:
    """Length of the part of the segment inside the box, in meters."""
    local = to_box_frame(seg, box)
    lam_near, lam_far = slab_lambdas(local, box)
    if lam_near > lam_far:
        return 0.0
    return (lam_far - lam_near) * seg.length


def segment_box_distance(seg: Segment, box: Aabb) -> float:
    """Euclidean distance between the segment and the solid box (0 if touching)."""
    local = to_box_frame(seg, box)
    d = segment_box_distances(
        local.start[None, :], local.end[None, :], box.lo[None, :], box.hi[None, :]
    )
    return float(d[0, 0])


# ---------------------------------------------------------------------------
# Vectorized forms over J segments x G boxes (axis-aligned boxes only).
# These are the hot paths for reward computation and clearance metrics.
# ---------------------------------------------------------------------------

def overlap_lengths(starts: np.ndarray, ends: np.ndarray,
                    los: np.ndarray, his: np.ndarray) -> np.ndarray:
    """Overlap lengths for all segment/box pairs.

    starts, ends: (J, 3); los, his: (G, 3).  Returns (J, G) in meters.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    ends = np.atleast_2d(np.asarray(ends, dtype=float))
    los = np.atleast_2d(np.asarray(los, dtype=float))
    his = np.atleast_2d(np.asarray(his, dtype=float))
    s = starts[:, None, :]                      # (J, 1, 3)
    d = (ends - starts)[:, None, :]             # (J, 1, 3)
    near, far = _axis_lambdas(s, d, los[None, :, :], his[None, :, :])
    lam_near = np.maximum(near.max(axis=2), 0.0)    # (J, G)
    lam_far = np.minimum(far.min(axis=2), 1.0)
    span = np.clip(lam_far - lam_near, 0.0, None)
    seg_len = np.linalg.norm(ends - starts, axis=1)  # (J,)
    return span * seg_len[:, None]


def segment_box_distances(starts: np.ndarray, ends: np.ndarray,
                          los: np.ndarray, his: np.ndarray,
                          iterations: int = 60) -> np.ndarray:
    """Segment-to-solid-box distances for all pairs, (J, G) in meters.

    Point-to-box distance is convex along the segment, so a golden-section
    search over the segment parameter converges for every pair at once.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    ends = np.atleast_2d(np.asarray(ends, dtype=float))
    los = np.atleast_2d(np.asarray(los, dtype=float))
    his = np.atleast_2d(np.asarray(his, dtype=float))
    J, G = starts.shape[0], los.shape[0]
    s = np.broadcast_to(starts[:, None, :], (J, G, 3))
    e = np.broadcast_to(ends[:, None, :], (J, G, 3))
    lo = np.broadcast_to(los[None, :, :], (J, G, 3))
    hi = np.broadcast_to(his[None, :, :], (J, G, 3))

    def dist_at(lam):
        p = s + (e - s) * lam[..., None]
        q = np.clip(p, lo, hi)
        return np.linalg.norm(p - q, axis=-1)

    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a = np.zeros((J, G))
    b = np.ones((J, G))
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc = dist_at(c)
    fd = dist_at(d)
    for _ in range(iterations):
        take_left = fc < fd
        b = np.where(take_left, d, b)
        a = np.where(take_left, a, c)
        # Recomputing both interior points keeps the update branch-free;
        # the extra evaluation is cheap at these sizes.
        c = b - inv_phi * (b - a)
        d = a + inv_phi * (b - a)
        fc = dist_at(c)
        fd = dist_at(d)
    mid = dist_at((a + b) / 2.0)
    # Endpoints can win when the minimum sits on the boundary.
    return np.minimum(np.minimum(mid, dist_at(np.zeros((J, G)))),
                      dist_at(np.ones((J, G))))
