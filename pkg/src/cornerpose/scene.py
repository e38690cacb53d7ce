"""Procedural cuboid scenes: cameras on a sphere, painter's-algorithm rendering,
surface point clouds and the fitted object-centric box.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geom3d import (
    BoundingBox3D,
    DetectionMask,
    Intrinsics,
    Pose,
    axis_angle_matrix,
    filter_points,
    fit_bounding_box,
    project_corners,
    project_points,
)
from .heatmap import Corners2D

# cuboid faces: (axis, sign); corner indices follow the box ordering
FACES = [(a, s) for a in range(3) for s in (-1, 1)]
MAX_RESAMPLE = 1000


@dataclass(frozen=True)
class GenConfig:
    image_size: tuple[int, int] = (64, 64)
    focal: float = 90.0
    edge_range: tuple[float, float] = (0.10, 0.30)
    distance_range: tuple[float, float] = (0.6, 1.0)
    n_refs: tuple[int, int] = (8, 8)
    n_points: int = 512
    look_jitter: float = 0.02
    margin: float = 4.0
    elevation_range: tuple[float, float] = (5.0, 65.0)  # degrees above the object's xy-plane
    roll_jitter: float = 0.15  # radians; pi gives uniformly random roll
    square_prob: float = 0.2
    background: float = 0.12

    def __post_init__(self):
        lo, hi = self.n_refs
        if not 1 <= lo <= hi <= 15:
            raise ValueError(f"reference count range {self.n_refs} must lie within [1, 15]")
        if self.image_size[0] < 8 or self.image_size[1] < 8:
            raise ValueError("image too small")
        if not 0 < self.distance_range[0] <= self.distance_range[1]:
            raise ValueError("bad camera distance range")
        if not -90.0 <= self.elevation_range[0] <= self.elevation_range[1] <= 90.0:
            raise ValueError("elevation range must lie within [-90, 90] degrees")
        if not 0 < self.edge_range[0] <= self.edge_range[1]:
            raise ValueError("bad edge length range")

    @classmethod
    def from_dict(cls, d: dict) -> GenConfig:
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def intrinsics(self) -> Intrinsics:
        H, W = self.image_size
        return Intrinsics(self.focal, self.focal, (W - 1) / 2, (H - 1) / 2, W, H)


@dataclass
class View:
    image: np.ndarray  # (H, W, 3) uint8
    pose: Pose
    mask: DetectionMask  # rectangle form
    silhouette: np.ndarray  # (H, W) bool


@dataclass
class Scene:
    intrinsics: Intrinsics
    query: View
    references: list[View]
    cloud: np.ndarray
    box: BoundingBox3D
    diameter: float
    symmetric: bool
    extents: np.ndarray = field(default=None)

    @property
    def size(self) -> tuple[int, int]:
        return self.intrinsics.height, self.intrinsics.width

    @property
    def gt_corners2d(self) -> Corners2D:
        return Corners2D.from_points(project_corners(self.query.pose, self.intrinsics, self.box), self.size)

    def reference_corners(self) -> list[np.ndarray]:
        return [project_corners(v.pose, self.intrinsics, self.box) for v in self.references]

    def with_references(self, idx) -> Scene:
        return replace(self, references=[self.references[i] for i in idx])

    def validate(self, tol: float = 1e-6) -> None:
        """Raise ValueError if the stored state is internally inconsistent."""
        if self.box.corners.shape != (8, 3):
            raise ValueError("box must have 8 corners")
        if not self.references:
            raise ValueError("scene has no reference views")
        for v in [self.query, *self.references]:
            if v.image.shape[:2] != self.size or v.silhouette.shape != self.size:
                raise ValueError("view image size does not match intrinsics")
            project_corners(v.pose, self.intrinsics, self.box)
        if not np.all(np.isfinite(self.cloud)):
            raise ValueError("cloud has non-finite points")
        if self.diameter <= 0:
            raise ValueError("diameter must be positive")


def look_at_pose(center, target, roll: float) -> Pose:
    """Camera at ``center`` looking at ``target`` (object frame), rolled about its axis.

    Roll 0 keeps object +z pointing up in the image (image rows grow downward).
    """
    z = np.asarray(target, float) - np.asarray(center, float)
    z /= np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = axis_angle_matrix([0.0, 0.0, 1.0], roll) @ np.stack([x, y, z])
    return Pose(R, -R @ np.asarray(center, float))


def cuboid_corners(extents) -> np.ndarray:
    half = np.asarray(extents, float) / 2
    return BoundingBox3D.from_bounds(-half, half).corners


def _face_corner_ids(axis: int, sign: int) -> list[int]:
    bit = 2 - axis
    ids = [i for i in range(8) if ((i >> bit) & 1) == (sign > 0)]
    # order the 4 corners around the face (swap the last two of the bit order)
    return [ids[0], ids[1], ids[3], ids[2]]


def _is_symmetric(extents, rel_tol: float = 1e-9) -> bool:
    e = np.sort(np.asarray(extents, float))
    return bool(np.any(np.diff(e) <= rel_tol * e[1:]))


@dataclass(frozen=True)
class Appearance:
    colors: np.ndarray  # (6, 3)
    frequency: float
    pattern: int  # 0 stripes, 1 checker
    contrast: float


def sample_appearance(rng: np.random.Generator) -> Appearance:
    return Appearance(
        colors=rng.uniform(0.15, 0.95, size=(6, 3)),
        frequency=float(rng.uniform(12.0, 30.0)),
        pattern=int(rng.integers(0, 2)),
        contrast=float(rng.uniform(0.1, 0.3)),
    )


LIGHT_DIR = np.array([0.35, 0.25, 0.9]) / np.linalg.norm([0.35, 0.25, 0.9])


def render_cuboid(extents, appearance: Appearance, pose: Pose, k: Intrinsics,
                  background: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Render the cuboid; returns (float image in [0, 1], silhouette bitmap).

    Back faces are culled and the remaining faces are painted far to near.
    Each face gets its flat color, a Lambert shade from a light fixed in the
    object frame (so a face looks the same from every camera) and a stripe or
    checker pattern in face coordinates.
    """
    H, W = k.height, k.width
    image = np.full((H, W, 3), background, dtype=np.float64)
    sil = np.zeros((H, W), dtype=bool)
    corners = cuboid_corners(extents)
    cam = pose.apply(corners)
    uv = np.column_stack([k.fx * cam[:, 0] / cam[:, 2] + k.cx, k.fy * cam[:, 1] / cam[:, 2] + k.cy])
    eye = pose.center
    half = np.asarray(extents, float) / 2

    faces = []
    for f, (axis, sign) in enumerate(FACES):
        normal = np.zeros(3)
        normal[axis] = sign
        if (eye - normal * half[axis]) @ normal <= 0:
            continue  # back face
        ids = _face_corner_ids(axis, sign)
        faces.append((cam[ids, 2].mean(), f, axis, sign, ids, normal))
    faces.sort(key=lambda x: -x[0])

    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    Kinv_rays = np.stack([(xs - k.cx) / k.fx, (ys - k.cy) / k.fy, np.ones_like(xs)], axis=-1)
    for _, f, axis, sign, ids, normal in faces:
        poly = uv[ids]
        inside = _inside_convex(poly, xs, ys)
        if not inside.any():
            continue
        # ray-plane intersection in camera frame, then back to object frame
        n_cam = pose.rotation @ normal
        d_cam = n_cam @ cam[ids[0]]
        rays = Kinv_rays[inside]
        depth = d_cam / (rays @ n_cam)
        p_obj = (rays * depth[:, None] - pose.translation) @ pose.rotation
        a, b = [j for j in range(3) if j != axis]
        s_u = p_obj[:, a] / max(half[a], 1e-9)
        s_v = p_obj[:, b] / max(half[b], 1e-9)
        if appearance.pattern == 0:
            pat = np.sign(np.sin(appearance.frequency * 0.25 * (s_u + s_v) * np.pi))
        else:
            pat = np.sign(np.sin(appearance.frequency * 0.15 * s_u * np.pi) * np.sin(appearance.frequency * 0.15 * s_v * np.pi))
        shade = 0.55 + 0.45 * max(float(normal @ LIGHT_DIR), 0.0)
        color = appearance.colors[f] * shade
        pix = color[None, :] * (1.0 + appearance.contrast * pat[:, None])
        image[inside] = np.clip(pix, 0.0, 1.0)
        sil |= inside
    return image, sil


def _inside_convex(poly: np.ndarray, xs: np.ndarray, ys: np.ndarray, pad: float = 0.5) -> np.ndarray:
    """Pixels whose square (half-width ``pad`` around the center) touches a convex polygon.

    Separating-axis test against the polygon's edge normals and the bounding box,
    for either winding. ``pad=0`` reduces it to a pixel-center test.
    """
    n = len(poly)
    lo, hi = poly.min(axis=0) - pad, poly.max(axis=0) + pad
    box = (xs >= lo[0]) & (xs <= hi[0]) & (ys >= lo[1]) & (ys <= hi[1])
    pos = box.copy()
    neg = box.copy()
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        cr = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
        m = pad * (abs(x1 - x0) + abs(y1 - y0))
        pos &= cr >= -m
        neg &= cr <= m
    return pos | neg


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def corner_rect(uv: np.ndarray) -> tuple[float, float, float, float]:
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def _camera_direction(rng, elevation_range) -> np.ndarray:
    """Unit vector uniform on the sphere zone between two elevations (degrees)."""
    lo, hi = np.sin(np.radians(elevation_range))
    sin_el = rng.uniform(lo, hi)
    az = rng.uniform(0.0, 2 * np.pi)
    cos_el = np.sqrt(max(0.0, 1.0 - sin_el * sin_el))
    return np.array([cos_el * np.cos(az), cos_el * np.sin(az), sin_el])


def _sample_camera(rng, cfg: GenConfig, extents, k: Intrinsics) -> Pose:
    corners = cuboid_corners(extents)
    H, W = cfg.image_size
    for _ in range(MAX_RESAMPLE):
        direction = _camera_direction(rng, cfg.elevation_range)
        dist = rng.uniform(*cfg.distance_range)
        target = rng.normal(0.0, cfg.look_jitter, size=3)
        pose = look_at_pose(direction * dist, target, rng.uniform(-cfg.roll_jitter, cfg.roll_jitter))
        cam = pose.apply(corners)
        if np.any(cam[:, 2] <= 0.05):
            continue
        uv = np.column_stack([k.fx * cam[:, 0] / cam[:, 2] + k.cx, k.fy * cam[:, 1] / cam[:, 2] + k.cy])
        m = cfg.margin
        if uv[:, 0].min() >= m and uv[:, 1].min() >= m and uv[:, 0].max() <= W - 1 - m and uv[:, 1].max() <= H - 1 - m:
            return pose
    raise RuntimeError("could not place a camera that keeps the object in view; check the generator config")


def sample_surface(extents, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the cuboid surface, plus its 8 corners."""
    half = np.asarray(extents, float) / 2
    areas = np.array([4 * half[(a + 1) % 3] * half[(a + 2) % 3] for a, _ in FACES])
    face = rng.choice(len(FACES), size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    for f, (axis, sign) in enumerate(FACES):
        pts[face == f, axis] = sign * half[axis]
    return np.vstack([cuboid_corners(extents), pts])


def max_pairwise_distance(points: np.ndarray) -> float:
    pts = np.asarray(points, float)
    best = 0.0
    for i in range(0, len(pts), 256):
        d = np.sqrt(((pts[i:i + 256, None, :] - pts[None, :, :]) ** 2).sum(-1))
        best = max(best, float(d.max()))
    return best


def _render_view(extents, appearance, pose, k, cfg) -> View:
    img, sil = render_cuboid(extents, appearance, pose, k, cfg.background)
    uv = project_corners(pose, k, BoundingBox3D(cuboid_corners(extents)))
    return View(to_uint8(img), pose, DetectionMask.from_rect(corner_rect(uv), k.height, k.width), sil)


def generate_scene(rng: np.random.Generator, cfg: GenConfig = GenConfig()) -> Scene:
    """Sample a random cuboid scene with a query view and N reference views."""
    k = cfg.intrinsics()
    extents = rng.uniform(*cfg.edge_range, size=3)
    if rng.uniform() < cfg.square_prob:
        i, j = rng.choice(3, size=2, replace=False)
        extents[j] = extents[i]
    appearance = sample_appearance(rng)
    n_refs = int(rng.integers(cfg.n_refs[0], cfg.n_refs[1] + 1))
    poses = [_sample_camera(rng, cfg, extents, k) for _ in range(n_refs + 1)]
    views = [_render_view(extents, appearance, p, k, cfg) for p in poses]

    raw_cloud = sample_surface(extents, cfg.n_points, rng)
    kept = filter_points(raw_cloud, [(v.pose, k, v.mask) for v in views[1:]])
    box, centroid = fit_bounding_box(kept)
    cloud = raw_cloud - centroid
    corners = cloud[:8]  # sample_surface puts the exact corners first
    for v in views:
        v.pose = v.pose.recentered(centroid)
        v.mask = DetectionMask.from_rect(corner_rect(project_points(v.pose, k, corners)), k.height, k.width)
    return Scene(
        intrinsics=k,
        query=views[0],
        references=views[1:],
        cloud=cloud,
        box=box,
        diameter=max_pairwise_distance(cloud),
        symmetric=_is_symmetric(extents),
        extents=extents,
    )


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator per (seed, scene index)."""
    return np.random.default_rng([seed, index])
