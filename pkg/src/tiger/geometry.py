"""Calibrated pinhole-camera and rigid-body geometry.

Conventions used throughout the package: camera frames are +X right, +Y down,
+Z forward with the pixel origin at the top-left corner; the world frame is
the first view's camera frame with up fixed to +Z and gravity (0, 0, -1);
poses map world-frame points into camera-frame points.  Lengths are meters,
angles radians, all arithmetic float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

WORLD_UP = (0.0, 0.0, 1.0)
WORLD_GRAVITY = (0.0, 0.0, -1.0)

_ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Base class for geometric contract violations."""


class NonPositiveDepth(GeometryError):
    pass


class OutOfBounds(GeometryError):
    pass


class BehindCamera(GeometryError):
    pass


class DegeneratePivot(GeometryError):
    pass


class TooFewPoints(GeometryError):
    pass


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal lengths, principal point, image size (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


class Pose:
    """Rigid camera-from-world transform: p_cam = R @ p_world + t."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation):
        R = np.array(rotation, dtype=float)
        t = np.array(translation, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise GeometryError("rotation must be 3x3")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise GeometryError("pose entries must be finite")
        if np.max(np.abs(R @ R.T - np.eye(3))) > _ORTHO_TOL:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise GeometryError("rotation determinant must be +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix4(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise GeometryError("pose matrix must be 4x4")
        if np.max(np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 1e-9:
            raise GeometryError("last row of a pose matrix must be (0,0,0,1)")
        return cls(m[:3, :3], m[:3, 3])

    def matrix4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def center(self) -> np.ndarray:
        """Camera center expressed in the world frame."""
        return -self.rotation.T @ self.translation

    def is_identity(self, tol: float = 1e-12) -> bool:
        return (
            np.max(np.abs(self.rotation - np.eye(3))) <= tol
            and np.max(np.abs(self.translation)) <= tol
        )

    def __eq__(self, other):
        return (
            isinstance(other, Pose)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __repr__(self):
        return f"Pose(R={self.rotation.tolist()}, t={self.translation.tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    """Transform applying b first, then a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    return Pose(a.rotation.T, -(a.rotation.T @ a.translation))


def transform(a: Pose, p) -> np.ndarray:
    """Apply the pose to one point (3,) or a stack of points (N, 3)."""
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        return a.rotation @ p + a.translation
    return p @ a.rotation.T + a.translation


@dataclass(frozen=True)
class ImagePoint:
    """A projected point carrying both pixel and normalized coordinates."""

    u: float
    v: float
    u_norm: float
    v_norm: float

    def inside(self) -> bool:
        return 0.0 <= self.u_norm <= 1.0 and 0.0 <= self.v_norm <= 1.0


@dataclass(frozen=True)
class Box2:
    """Axis-aligned 2D box in pixel coordinates."""

    umin: float
    vmin: float
    umax: float
    vmax: float

    def __post_init__(self):
        vals = (self.umin, self.vmin, self.umax, self.vmax)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError("box coordinates must be finite")
        if not (self.umin < self.umax and self.vmin < self.vmax):
            raise GeometryError("box must have positive extent")

    @property
    def area(self) -> float:
        return (self.umax - self.umin) * (self.vmax - self.vmin)


@dataclass(frozen=True)
class OrientedBox3:
    """Gravity-aligned 3D box: center, half extents, yaw about world +Z."""

    center: tuple
    half_extents: tuple
    yaw: float

    def __post_init__(self):
        c = tuple(float(x) for x in self.center)
        h = tuple(float(x) for x in self.half_extents)
        if len(c) != 3 or len(h) != 3:
            raise GeometryError("center and half_extents must be 3-vectors")
        if not all(math.isfinite(x) for x in c + h + (self.yaw,)):
            raise GeometryError("box fields must be finite")
        if not all(x > 0 for x in h):
            raise GeometryError("half extents must be positive")
        yaw = float(self.yaw)
        yaw = math.remainder(yaw, 2.0 * math.pi)
        if yaw >= math.pi:  # remainder returns (-pi, pi]; fold pi to -pi
            yaw -= 2.0 * math.pi
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)
        object.__setattr__(self, "yaw", yaw)

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def corners(self) -> np.ndarray:
        signs = np.array(
            [
                [sx, sy, sz]
                for sx in (-1.0, 1.0)
                for sy in (-1.0, 1.0)
                for sz in (-1.0, 1.0)
            ]
        )
        local = signs * np.asarray(self.half_extents)
        return local @ self.rotation().T + np.asarray(self.center)

    @property
    def zmin(self) -> float:
        return self.center[2] - self.half_extents[2]

    @property
    def zmax(self) -> float:
        return self.center[2] + self.half_extents[2]

    def contains(self, points, tol: float = 1e-9) -> bool:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        local = (pts - np.asarray(self.center)) @ self.rotation()
        return bool(np.all(np.abs(local) <= np.asarray(self.half_extents) + tol))

    def canonical(self) -> "OrientedBox3":
        """Equivalent box with yaw folded into [-pi/4, pi/4).

        A gravity-aligned box is invariant under a 90 degree yaw plus a swap
        of the horizontal extents; this picks the unique representative.
        """
        k = math.floor((self.yaw + math.pi / 4) / (math.pi / 2))
        yaw = self.yaw - k * (math.pi / 2)
        hx, hy, hz = self.half_extents
        if k % 2 != 0:
            hx, hy = hy, hx
        return OrientedBox3(self.center, (hx, hy, hz), yaw)


@dataclass(frozen=True)
class DepthMap:
    """Dense per-pixel metric depth; zero encodes an invalid measurement."""

    width: int
    height: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.height, self.width):
            raise GeometryError("depth values must be height x width")
        if not np.all(np.isfinite(vals)):
            raise GeometryError("depth values must be finite")
        if np.any(vals < 0):
            raise GeometryError("valid depth values must be positive")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def valid_mask(self) -> np.ndarray:
        return self.values > 0


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def unproject(u, v, depth, intr: CameraIntrinsics) -> np.ndarray:
    """Lift pixel coordinates plus depth into the camera frame.

    Accepts scalars or equally shaped arrays; returns shape (..., 3).
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    d = np.asarray(depth, dtype=float)
    if np.any(d <= 0):
        raise NonPositiveDepth("depth must be positive")
    if np.any((u < 0) | (u > intr.width) | (v < 0) | (v > intr.height)):
        raise OutOfBounds("pixel outside image bounds")
    x = (u - intr.cx) * d / intr.fx
    y = (v - intr.cy) * d / intr.fy
    return np.stack(np.broadcast_arrays(x, y, d), axis=-1)


def project(point_world, intr: CameraIntrinsics, pose: Pose) -> ImagePoint:
    """Project one world-frame point to the image plane of the given view."""
    p = transform(pose, np.asarray(point_world, dtype=float))
    if p[2] <= 0:
        raise BehindCamera(f"camera-frame z = {p[2]} is not positive")
    u = intr.fx * p[0] / p[2] + intr.cx
    v = intr.fy * p[1] / p[2] + intr.cy
    return ImagePoint(u, v, u / intr.width, v / intr.height)


def project_many(points, intr: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """Project (N, 3) world points to (N, 2) pixel coordinates."""
    p = transform(pose, np.asarray(points, dtype=float))
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCamera("point behind camera")
    u = intr.fx * p[..., 0] / z + intr.cx
    v = intr.fy * p[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1)


def gravity_direction(pose: Pose) -> np.ndarray:
    """Unit gravity vector expressed in the camera frame of the pose."""
    g = pose.rotation @ np.asarray(WORLD_GRAVITY)
    return g / np.linalg.norm(g)


# ---------------------------------------------------------------------------
# Camera motion
# ---------------------------------------------------------------------------


class OrbitDirection(str, Enum):
    LEFT = "left"
    RIGHT = "right"


def relative_camera_motion(pose1: Pose, pose2: Pose, pivot):
    """Classify camera motion around a pivot as left or right.

    The orbit angle is measured about the world up axis between the two
    pivot-to-camera directions, counter-clockwise positive when seen from
    above.  Counter-clockwise motion is "right", clockwise is "left"; a zero
    angle ties toward right.  Returns (direction, signed angle in radians).
    """
    pivot = np.asarray(pivot, dtype=float)
    d1 = pose1.center() - pivot
    d2 = pose2.center() - pivot
    for d in (d1, d2):
        if np.linalg.norm(d) < 1e-12:
            raise DegeneratePivot("camera center coincides with pivot")
        if np.hypot(d[0], d[1]) < 1e-12:
            raise DegeneratePivot("camera center directly above pivot")
    cross = d1[0] * d2[1] - d1[1] * d2[0]
    dot = d1[0] * d2[0] + d1[1] * d2[1]
    angle = math.atan2(cross, dot)
    direction = OrbitDirection.RIGHT if angle >= 0 else OrbitDirection.LEFT
    return direction, angle


# ---------------------------------------------------------------------------
# 2D / 3D box math
# ---------------------------------------------------------------------------


def iou_2d(a: Box2, b: Box2) -> float:
    iw = min(a.umax, b.umax) - max(a.umin, b.umin)
    ih = min(a.vmax, b.vmax) - max(a.vmin, b.vmin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _dot3(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _sub3(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _cross3(a, b):
    return (
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    )


def _lerp3(a, b, t):
    return (
        a[0] + t * (b[0] - a[0]),
        a[1] + t * (b[1] - a[1]),
        a[2] + t * (b[2] - a[2]),
    )


def _closest_on_segment(a, b):
    ab = _sub3(b, a)
    denom = _dot3(ab, ab)
    if denom == 0.0:
        return a, [a]
    t = -_dot3(a, ab) / denom
    if t <= 0.0:
        return a, [a]
    if t >= 1.0:
        return b, [b]
    return _lerp3(a, b, t), [a, b]


def _closest_on_triangle(a, b, c):
    # Ericson's closest-point-on-triangle with the origin as the query point.
    ab = _sub3(b, a)
    ac = _sub3(c, a)
    n = _cross3(ab, ac)
    if _dot3(n, n) < 1e-30:
        best = None
        for p, q in ((a, b), (a, c), (b, c)):
            v, kept = _closest_on_segment(p, q)
            if best is None or _dot3(v, v) < _dot3(best[0], best[0]):
                best = (v, kept)
        return best
    d1 = -_dot3(ab, a)
    d2 = -_dot3(ac, a)
    if d1 <= 0 and d2 <= 0:
        return a, [a]
    d3 = -_dot3(ab, b)
    d4 = -_dot3(ac, b)
    if d3 >= 0 and d4 <= d3:
        return b, [b]
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        t = d1 / (d1 - d3)
        return _lerp3(a, b, t), [a, b]
    d5 = -_dot3(ab, c)
    d6 = -_dot3(ac, c)
    if d6 >= 0 and d5 <= d6:
        return c, [c]
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        t = d2 / (d2 - d6)
        return _lerp3(a, c, t), [a, c]
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return _lerp3(b, c, t), [b, c]
    denom = va + vb + vc
    v = vb / denom
    w = vc / denom
    return (
        a[0] + ab[0] * v + ac[0] * w,
        a[1] + ab[1] * v + ac[1] * w,
        a[2] + ab[2] * v + ac[2] * w,
    ), [a, b, c]


def _closest_on_simplex(simplex):
    n = len(simplex)
    if n == 1:
        return simplex[0], [simplex[0]]
    if n == 2:
        return _closest_on_segment(simplex[0], simplex[1])
    if n == 3:
        return _closest_on_triangle(simplex[0], simplex[1], simplex[2])
    a, b, c, d = simplex
    best = None
    inside = True
    for p, q, r, s in ((a, b, c, d), (a, c, d, b), (a, b, d, c), (b, c, d, a)):
        n_face = _cross3(_sub3(q, p), _sub3(r, p))
        dp = -_dot3(n_face, p)
        ds = _dot3(n_face, _sub3(s, p))
        if abs(ds) < 1e-18 or dp * ds < 0:
            inside = False
            v, kept = _closest_on_triangle(p, q, r)
            if best is None or _dot3(v, v) < _dot3(best[0], best[0]):
                best = (v, kept)
    if inside:
        return (0.0, 0.0, 0.0), [a, b, c, d]
    return best


def _distance_to_hull(points: np.ndarray) -> float:
    """Distance from the origin to the convex hull of a finite point set (GJK)."""
    start = int(np.argmin(np.einsum("ij,ij->i", points, points)))
    simplex = [tuple(points[start])]
    for _ in range(200):
        v, simplex = _closest_on_simplex(simplex)
        nv2 = _dot3(v, v)
        if nv2 <= 1e-24:
            return 0.0
        s = tuple(points[int(np.argmin(points @ v))])
        nv = math.sqrt(nv2)
        # Supporting-plane bound: true distance >= (s . v)/|v|.
        if nv - _dot3(s, v) / nv <= 1e-12 * max(1.0, nv):
            return nv
        if s in simplex:
            return nv
        simplex.append(s)
    return math.sqrt(_dot3(v, v))


def obb_distance(a: OrientedBox3, b: OrientedBox3) -> float:
    """Minimum Euclidean distance between two solid oriented boxes (0 if they intersect)."""
    # Canonical argument order makes the result exactly symmetric.
    ka = (a.center, a.half_extents, a.yaw)
    kb = (b.center, b.half_extents, b.yaw)
    if kb < ka:
        a, b = b, a
    diffs = (a.corners()[:, None, :] - b.corners()[None, :, :]).reshape(-1, 3)
    return _distance_to_hull(diffs)


def point_obb_distance(p, box: OrientedBox3) -> float:
    """Distance from a point to a solid oriented box (0 inside)."""
    local = (np.asarray(p, dtype=float) - np.asarray(box.center)) @ box.rotation()
    h = np.asarray(box.half_extents)
    excess = np.maximum(np.abs(local) - h, 0.0)
    return float(np.linalg.norm(excess))


def project_half_extent(box: OrientedBox3, direction) -> float:
    """Half extent of the box projected onto a world-frame unit direction."""
    u = np.asarray(direction, dtype=float)
    return float(np.abs(u @ box.rotation()) @ np.asarray(box.half_extents))


# ---------------------------------------------------------------------------
# Box fitting
# ---------------------------------------------------------------------------


def fit_obb(points, min_extent: float = 0.01) -> OrientedBox3:
    """Fit a gravity-aligned oriented box around 3D world points.

    The vertical span comes from the min/max height, the yaw from the 2D
    principal axis of the ground-plane projection (folded into [-pi/4, pi/4)),
    and each half extent is clamped to at least min_extent / 2.  Collinear
    ground-plane spreads fall back to yaw 0.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] < 3:
        raise TooFewPoints("need at least 3 points")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("points must be finite")

    zmin = float(pts[:, 2].min())
    zmax = float(pts[:, 2].max())

    xy = pts[:, :2]
    centered = xy - xy.mean(axis=0)
    cov = centered.T @ centered / pts.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= 1e-12 or evals[0] <= 1e-9 * evals[1]:
        yaw = 0.0  # degenerate ground-plane spread
    else:
        major = evecs[:, 1]
        yaw = math.atan2(major[1], major[0])
        k = math.floor((yaw + math.pi / 4) / (math.pi / 2))
        yaw -= k * (math.pi / 2)

    c, s = math.cos(yaw), math.sin(yaw)
    xl = xy[:, 0] * c + xy[:, 1] * s
    yl = -xy[:, 0] * s + xy[:, 1] * c
    mid_x = (xl.min() + xl.max()) / 2.0
    mid_y = (yl.min() + yl.max()) / 2.0
    hx = max((xl.max() - xl.min()) / 2.0, min_extent / 2.0)
    hy = max((yl.max() - yl.min()) / 2.0, min_extent / 2.0)
    hz = max((zmax - zmin) / 2.0, min_extent / 2.0)
    center = (
        mid_x * c - mid_y * s,
        mid_x * s + mid_y * c,
        (zmin + zmax) / 2.0,
    )
    return OrientedBox3(center, (hx, hy, hz), yaw)
