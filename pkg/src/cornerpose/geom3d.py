"""Rigid poses, pinhole projection, multiview point filtering and box fitting.

Pose convention used throughout the package: camera-from-object, i.e.
``p_cam = R @ p_obj + t``. Pixel centers sit at integer coordinates, with
``u`` running along image columns and ``v`` along rows.

Box corners are ordered by the bit pattern ``i = 4*bx + 2*by + bz`` where each
bit selects the min (0) or max (1) bound along that axis, so ``z`` varies
fastest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9
DEGENERATE_EXTENT = 1e-12

# corner index -> (bx, by, bz)
CORNER_BITS = np.array([[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)])

# the 12 box edges as corner index pairs (corners differing in exactly one bit)
BOX_EDGES = tuple(
    (i, i | (1 << b)) for i in range(8) for b in (2, 1, 0) if not i & (1 << b)
)


class GeometryError(ValueError):
    pass


class BehindCameraError(GeometryError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class EmptyCloudError(GeometryError):
    pass


class DegenerateBoxError(GeometryError):
    pass


class InvalidAxisError(GeometryError):
    pass


class InvalidCropError(GeometryError):
    pass


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(rotvec) -> np.ndarray:
    """Rotation matrix from an axis-angle vector (angle = norm)."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec)
    K = skew(rotvec)
    if theta < 1e-8:
        # second-order Taylor expansion keeps the result orthonormal to ~1e-24
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    return rodrigues(axis / np.linalg.norm(axis) * angle)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, robust near 0 and pi."""
    # atan2 form avoids the arccos precision loss for tiny angles
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2
    c = (np.trace(R) - 1) / 2
    return float(np.arctan2(s, c))


def rotation_error(Ra: np.ndarray, Rb: np.ndarray) -> float:
    return rotation_angle(Ra.T @ Rb)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n > 1e-6:
            return v / n


@dataclass(frozen=True)
class Pose:
    """Camera-from-object rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise GeometryError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1) > ORTHO_TOL:
            raise GeometryError("rotation is not a proper orthonormal matrix")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> Pose:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def center(self) -> np.ndarray:
        """Camera optical center in object coordinates."""
        return -self.rotation.T @ self.translation

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> Pose:
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def recentered(self, origin) -> Pose:
        """Same camera, object frame moved so that ``origin`` becomes (0, 0, 0)."""
        return Pose(self.rotation, self.translation + self.rotation @ np.asarray(origin, dtype=float))

    def flat(self) -> np.ndarray:
        """12 numbers: R row-major then t."""
        return np.concatenate([self.rotation.ravel(), self.translation])


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise GeometryError("image size must be at least 1x1")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def flat(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy, self.width, self.height], dtype=float)


@dataclass(frozen=True)
class DetectionMask:
    """Object region in an image, either a boolean bitmap or a rectangle.

    ``rect`` is ``(x0, y0, x1, y1)`` in pixel coordinates and is closed on
    both ends. A bitmap contains a continuous point when the pixel whose center
    is nearest to it is set.
    """

    height: int
    width: int
    bitmap: np.ndarray | None = None
    rect: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if (self.bitmap is None) == (self.rect is None):
            raise GeometryError("mask needs exactly one of bitmap or rect")
        if self.bitmap is not None:
            bm = np.asarray(self.bitmap, dtype=bool)
            if bm.shape != (self.height, self.width):
                raise GeometryError(f"mask bitmap shape {bm.shape} != image {(self.height, self.width)}")
            object.__setattr__(self, "bitmap", bm)
        else:
            object.__setattr__(self, "rect", tuple(float(v) for v in self.rect))

    @classmethod
    def from_rect(cls, rect, height: int, width: int) -> DetectionMask:
        return cls(height=height, width=width, rect=tuple(rect))

    @classmethod
    def from_bitmap(cls, bitmap) -> DetectionMask:
        bitmap = np.asarray(bitmap, dtype=bool)
        return cls(height=bitmap.shape[0], width=bitmap.shape[1], bitmap=bitmap)

    def contains(self, uv) -> np.ndarray:
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        u, v = uv[:, 0], uv[:, 1]
        if self.rect is not None:
            x0, y0, x1, y1 = self.rect
            return (u >= x0) & (u <= x1) & (v >= y0) & (v <= y1)
        finite = np.isfinite(u) & np.isfinite(v)
        col = np.where(finite, np.floor(u + 0.5), -1).astype(np.int64)
        row = np.where(finite, np.floor(v + 0.5), -1).astype(np.int64)
        inside = (col >= 0) & (col < self.width) & (row >= 0) & (row < self.height)
        out = np.zeros(len(uv), dtype=bool)
        out[inside] = self.bitmap[row[inside], col[inside]]
        return out

    def area(self) -> float:
        if self.rect is not None:
            x0, y0, x1, y1 = self.rect
            return max(0.0, x1 - x0) * max(0.0, y1 - y0)
        return float(self.bitmap.sum())


@dataclass(frozen=True)
class BoundingBox3D:
    corners: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.corners, dtype=float)
        if c.shape != (8, 3):
            raise GeometryError(f"a box has exactly 8 corners, got shape {c.shape}")
        c.flags.writeable = False
        object.__setattr__(self, "corners", c)

    @classmethod
    def from_bounds(cls, lo, hi) -> BoundingBox3D:
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        return cls(np.where(CORNER_BITS == 1, hi, lo))

    @property
    def center(self) -> np.ndarray:
        return self.corners.mean(axis=0)

    def edge_lengths(self) -> np.ndarray:
        return np.array([np.linalg.norm(self.corners[j] - self.corners[i]) for i, j in BOX_EDGES])


def _camera_points(pose: Pose, points) -> np.ndarray:
    return pose.apply(np.atleast_2d(points))


def project_points(pose: Pose, k: Intrinsics, points) -> np.ndarray:
    """Project (N, 3) object points to (N, 2) pixels; raises on non-positive depth."""
    pc = _camera_points(pose, points)
    bad = np.flatnonzero(~(pc[:, 2] > 0))
    if bad.size:
        raise BehindCameraError(f"point {bad[0]} has non-positive depth {pc[bad[0], 2]:.6g}", int(bad[0]))
    return np.stack([k.fx * pc[:, 0] / pc[:, 2] + k.cx, k.fy * pc[:, 1] / pc[:, 2] + k.cy], axis=1)


def project_point(pose: Pose, k: Intrinsics, p) -> np.ndarray:
    return project_points(pose, k, np.asarray(p, dtype=float).reshape(1, 3))[0]


def project_corners(pose: Pose, k: Intrinsics, box: BoundingBox3D) -> np.ndarray:
    try:
        return project_points(pose, k, box.corners)
    except BehindCameraError as err:
        raise BehindCameraError(f"box corner {err.index} is behind the camera", err.index) from None


def visible_in_views(points, views) -> np.ndarray:
    """Boolean keep-mask: True where a point projects inside every view's mask."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if not views:
        raise GeometryError("filtering needs at least one view")
    keep = np.ones(len(points), dtype=bool)
    for pose, k, mask in views:
        if (mask.height, mask.width) != (k.height, k.width):
            raise GeometryError("mask size does not match intrinsics")
        pc = _camera_points(pose, points)
        front = pc[:, 2] > 0
        uv = np.full((len(points), 2), np.nan)
        z = pc[front, 2]
        uv[front, 0] = k.fx * pc[front, 0] / z + k.cx
        uv[front, 1] = k.fy * pc[front, 1] / z + k.cy
        keep &= front & mask.contains(uv)
    return keep


def filter_points(cloud, views) -> np.ndarray:
    """Keep the points that project inside the mask of every view.

    Points behind any camera count as outside. Raises EmptyCloudError when
    nothing survives; callers that can tolerate that should catch it.
    """
    cloud = np.atleast_2d(np.asarray(cloud, dtype=float))
    out = cloud[visible_in_views(cloud, views)]
    if len(out) == 0:
        raise EmptyCloudError("no point survives the multiview mask filter")
    return out


def fit_bounding_box(cloud) -> tuple[BoundingBox3D, np.ndarray]:
    """Axis-aligned box of the centroid-centered cloud.

    Returns the box (in the object-centric frame) and the centroid that was
    subtracted.
    """
    cloud = np.atleast_2d(np.asarray(cloud, dtype=float))
    if cloud.ndim != 2 or cloud.shape[1] != 3 or len(cloud) < 2:
        raise DegenerateBoxError("box fitting needs at least two 3D points")
    centroid = cloud.mean(axis=0)
    centered = cloud - centroid
    lo, hi = centered.min(axis=0), centered.max(axis=0)
    if np.any(hi - lo < DEGENERATE_EXTENT):
        raise DegenerateBoxError(f"degenerate extent {hi - lo}")
    return BoundingBox3D.from_bounds(lo, hi), centroid


def rotate_box(box: BoundingBox3D, axis, angle: float) -> BoundingBox3D:
    axis = np.asarray(axis, dtype=float)
    if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1) > 1e-9:
        raise InvalidAxisError("rotation axis must be a unit 3-vector")
    R = rodrigues(axis * angle)
    c = box.center
    return BoundingBox3D((box.corners - c) @ R.T + c)


def crop_intrinsics(k: Intrinsics, crop, out_size) -> Intrinsics:
    """Intrinsics after cropping ``crop = (x0, y0, w, h)`` and resizing to ``out_size = (W, H)``.

    The pixel map is ``u' = (u - x0) * W / w`` (and likewise for rows).
    """
    x0, y0, w, h = (float(v) for v in crop)
    W, H = out_size
    if w <= 0 or h <= 0 or W < 1 or H < 1:
        raise InvalidCropError(f"crop {crop} -> {out_size} has no area")
    if x0 < 0 or y0 < 0 or x0 + w > k.width or y0 + h > k.height:
        raise InvalidCropError(f"crop {crop} exceeds the {k.width}x{k.height} image")
    sx, sy = W / w, H / h
    return Intrinsics(k.fx * sx, k.fy * sy, (k.cx - x0) * sx, (k.cy - y0) * sy, int(W), int(H))
