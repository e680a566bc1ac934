"""Deterministic point-cloud and box geometry kernels.

Pure numpy, no autodiff: sampling, grouping and IoU decisions are discrete
and gradients never flow through them. Every tie-break is pinned (lowest
index, then lowest center-x where noted) so repeated runs are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeMismatchError

CLASS_NAMES = ("Car", "Pedestrian", "Cyclist")

# Attribute layout per modality tag: lidar carries intensity, radar carries
# radar cross-section and radial (Doppler) speed.
MODALITY_ATTRS = {"lidar": ("intensity",), "radar": ("rcs", "doppler")}

_CLIP_EPS = 1e-9


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    w = (a + math.pi) % (2.0 * math.pi)
    return math.pi if w == 0.0 else w - math.pi


@dataclass(frozen=True, eq=False)
class Box3D:
    """Upright 3D box: center, (length, width, height), yaw about +z.

    Yaw is normalized to (-pi, pi] on construction; length is the extent
    along the box's own x axis at yaw 0.
    """

    center: np.ndarray
    size: np.ndarray
    yaw: float
    class_id: int

    def __eq__(self, other):
        if not isinstance(other, Box3D):
            return NotImplemented
        return (
            np.array_equal(self.center, other.center)
            and np.array_equal(self.size, other.size)
            and self.yaw == other.yaw
            and self.class_id == other.class_id
        )

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64)
        size = np.asarray(self.size, dtype=np.float64)
        if center.shape != (3,) or size.shape != (3,):
            raise ShapeMismatchError("Box3D center and size must be 3-vectors")
        if not (np.isfinite(center).all() and np.isfinite(size).all()):
            raise ContractError("Box3D values must be finite")
        if (size <= 0).any():
            raise ContractError("Box3D sizes must be positive")
        if self.class_id not in range(len(CLASS_NAMES)):
            raise ContractError(f"class_id {self.class_id} out of range")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def volume(self) -> float:
        return float(self.size.prod())

    def corners_bev(self) -> np.ndarray:
        """Four BEV corners in counter-clockwise order, shape (4, 2)."""
        l, w = self.size[0] / 2.0, self.size[1] / 2.0
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]


@dataclass(frozen=True)
class Detection:
    """A decoded box with a confidence score in [0, 1]."""

    box: Box3D
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ContractError(f"score {self.score} outside [0, 1]")


@dataclass
class PointCloud:
    """Positions (N, 3) plus per-point attributes matching the modality tag."""

    positions: np.ndarray
    attributes: np.ndarray
    modality: str

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.attributes = np.asarray(self.attributes, dtype=np.float64)
        if self.modality not in MODALITY_ATTRS:
            raise ContractError(f"unknown modality {self.modality!r}")
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ShapeMismatchError("positions must be (N, 3)")
        want = len(MODALITY_ATTRS[self.modality])
        if self.attributes.shape != (self.positions.shape[0], want):
            raise ShapeMismatchError(
                f"{self.modality} attributes must be (N, {want}), got {self.attributes.shape}"
            )
        if not (np.isfinite(self.positions).all() and np.isfinite(self.attributes).all()):
            raise ContractError("point cloud values must be finite")

    @property
    def n(self) -> int:
        return self.positions.shape[0]


@dataclass
class GroupIndex:
    """Ball-query result: member indices, real-member mask, per-group validity."""

    indices: np.ndarray  # (M, K) int64, padded by repeating the first member
    member_mask: np.ndarray  # (M, K) bool, True for real (non-pad) members
    valid: np.ndarray = field(default=None)  # (M,) bool, False when nothing in radius

    def __post_init__(self):
        if self.valid is None:
            self.valid = self.member_mask.any(axis=1)


def _to_frame(points: np.ndarray, box: Box3D) -> np.ndarray:
    d = points - box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x = c * d[:, 0] + s * d[:, 1]
    y = -s * d[:, 0] + c * d[:, 1]
    return np.stack([x, y, d[:, 2]], axis=1)


def points_in_box(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Boolean mask of points inside the box; faces are inclusive."""
    f = _to_frame(np.atleast_2d(points), box)
    half = box.size / 2.0
    return (np.abs(f) <= half).all(axis=1)


def point_in_box(point: np.ndarray, box: Box3D) -> bool:
    return bool(points_in_box(np.asarray(point)[None, :], box)[0])


def points_centeredness(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Soft center score in [0, 1] per point: cube root of the product of
    near-face/far-face distance ratios along the three box axes, 0 outside."""
    points = np.atleast_2d(points)
    f = _to_frame(points, box)
    half = box.size / 2.0
    inside = (np.abs(f) <= half).all(axis=1)
    lo = half + f  # distance to the negative face per axis
    hi = half - f  # distance to the positive face per axis
    near = np.minimum(lo, hi)
    far = np.maximum(lo, hi)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(far > 0, near / far, 0.0)
    score = np.cbrt(ratio.prod(axis=1))
    return np.where(inside, np.maximum(score, 0.0), 0.0)


def gt_centeredness(point: np.ndarray, box: Box3D) -> float:
    return float(points_centeredness(np.asarray(point)[None, :], box)[0])


def canonical_order(positions: np.ndarray, attributes: np.ndarray) -> np.ndarray:
    """Permutation sorting points by (x, y, z, attributes), making any
    downstream index-based tie-break independent of input order."""
    keys = [attributes[:, j] for j in range(attributes.shape[1] - 1, -1, -1)]
    keys += [positions[:, 2], positions[:, 1], positions[:, 0]]
    return np.lexsort(tuple(keys))


def farthest_point_sampling(positions: np.ndarray, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min sampling of k point indices starting from seed_index.

    Ties on the max-min distance go to the lowest index. Requires 1 <= k <= N.
    """
    n = positions.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"cannot sample {k} of {n} points")
    if not 0 <= seed_index < n:
        raise ContractError(f"seed index {seed_index} out of range")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed_index
    d2 = ((positions - positions[seed_index]) ** 2).sum(axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(d2))  # first occurrence == lowest index on ties
        chosen[i] = nxt
        nd2 = ((positions - positions[nxt]) ** 2).sum(axis=1)
        np.minimum(d2, nd2, out=d2)
    return chosen


def ball_query(
    centers: np.ndarray, positions: np.ndarray, radius: float, max_k: int
) -> GroupIndex:
    """Up to max_k in-radius neighbors per center, ordered by ascending index.

    Slots beyond the found members repeat the first found index with the
    member mask cleared. A center with nothing in radius gets its globally
    nearest point (lowest index on ties) in every slot and valid=False.
    """
    if max_k < 1:
        raise ContractError("max_k must be >= 1")
    m, n = centers.shape[0], positions.shape[0]
    if n == 0:
        raise ContractError("ball_query needs a non-empty point set")
    idx = np.zeros((m, max_k), dtype=np.int64)
    mask = np.zeros((m, max_k), dtype=bool)
    valid = np.zeros(m, dtype=bool)
    r2 = radius * radius
    block = max(1, int(2**22 // max(n, 1)))  # keep the distance block ~32 MB
    for start in range(0, m, block):
        stop = min(start + block, m)
        d2 = ((centers[start:stop, None, :] - positions[None, :, :]) ** 2).sum(axis=2)
        for row in range(stop - start):
            found = np.flatnonzero(d2[row] <= r2)
            i = start + row
            if found.size == 0:
                idx[i] = int(np.argmin(d2[row]))
                continue
            take = found[:max_k]
            idx[i, : take.size] = take
            idx[i, take.size :] = take[0]
            mask[i, : take.size] = True
            valid[i] = True
    return GroupIndex(indices=idx, member_mask=mask, valid=valid)


def radius_nn(queries: np.ndarray, refs: np.ndarray, radius: float) -> np.ndarray:
    """Index of the nearest reference within radius per query, -1 when none.

    Distance ties resolve to the lowest reference index.
    """
    if refs.shape[0] == 0:
        return np.full(queries.shape[0], -1, dtype=np.int64)
    d2 = ((queries[:, None, :] - refs[None, :, :]) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1)  # first occurrence == lowest index
    best = d2[np.arange(queries.shape[0]), nearest]
    return np.where(best <= radius * radius, nearest, -1).astype(np.int64)


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip(poly: list, a: np.ndarray, b: np.ndarray) -> list:
    """Keep the part of a polygon left of the directed edge a->b."""
    out = []
    d = b - a
    for i in range(len(poly)):
        p, q = poly[i], poly[(i + 1) % len(poly)]
        cp = d[0] * (p[1] - a[1]) - d[1] * (p[0] - a[0])
        cq = d[0] * (q[1] - a[1]) - d[1] * (q[0] - a[0])
        if cp >= -_CLIP_EPS:
            out.append(p)
        if (cp >= -_CLIP_EPS) != (cq >= -_CLIP_EPS):
            den = cp - cq
            if abs(den) > _CLIP_EPS:
                t = cp / den
                out.append(p + t * (q - p))
    return out


def _bev_intersection_area(a: Box3D, b: Box3D) -> float:
    poly = list(a.corners_bev())
    cb = b.corners_bev()
    for i in range(4):
        poly = _clip(poly, cb[i], cb[(i + 1) % 4])
        if len(poly) < 3:
            return 0.0
    return _polygon_area(np.array(poly))


def rotated_iou_3d(a: Box3D, b: Box3D) -> float:
    """Exact IoU of two upright rotated boxes: BEV polygon clipping times
    vertical overlap, clamped to [0, 1]."""
    inter_bev = _bev_intersection_area(a, b)
    if inter_bev <= 0.0:
        return 0.0
    za0, za1 = a.center[2] - a.size[2] / 2.0, a.center[2] + a.size[2] / 2.0
    zb0, zb1 = b.center[2] - b.size[2] / 2.0, b.center[2] + b.size[2] / 2.0
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0.0:
        return 0.0
    inter = inter_bev * dz
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy class-wise suppression.

    Order: descending score, ties by lower box-center x, then input index.
    A detection is dropped when a kept detection of the same class overlaps
    it with IoU strictly above the threshold.
    """
    if not detections:
        return []
    scores = np.array([d.score for d in detections])
    cx = np.array([d.box.center[0] for d in detections])
    order = np.lexsort((np.arange(len(detections)), cx, -scores))
    kept: list[int] = []
    for i in order:
        di = detections[int(i)]
        dup = any(
            detections[j].box.class_id == di.box.class_id
            and rotated_iou_3d(detections[j].box, di.box) > iou_threshold
            for j in kept
        )
        if not dup:
            kept.append(int(i))
    return [detections[i] for i in kept]
