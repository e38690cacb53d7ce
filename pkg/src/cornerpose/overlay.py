"""Box wireframe overlays written as binary PPM (P6)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geom3d import BOX_EDGES, BoundingBox3D, Intrinsics, Pose

GREEN = (0, 255, 0)
BLUE = (0, 0, 255)
NEAR = 1e-6


def _clip_segment(a: np.ndarray, b: np.ndarray):
    """Clip a camera-frame segment to z >= NEAR; None if fully behind."""
    za, zb = a[2], b[2]
    if za < NEAR and zb < NEAR:
        return None
    if za < NEAR:
        a = a + (b - a) * (NEAR - za) / (zb - za)
    elif zb < NEAR:
        b = b + (a - b) * (NEAR - zb) / (za - zb)
    return a, b


def _to_pixel(p: np.ndarray, k: Intrinsics) -> np.ndarray:
    return np.array([k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy])


def line_pixels(p0, p1) -> np.ndarray:
    """Integer pixels on the segment between two (rounded) endpoints, endpoints included."""
    x0, y0 = (int(v) for v in np.round(p0))
    x1, y1 = (int(v) for v in np.round(p1))
    n = max(abs(x1 - x0), abs(y1 - y0))
    if n == 0:
        return np.array([[x0, y0]])
    t = np.arange(n + 1) / n
    xs = np.round(x0 + (x1 - x0) * t).astype(np.int64)
    ys = np.round(y0 + (y1 - y0) * t).astype(np.int64)
    return np.stack([xs, ys], axis=1)


def box_edge_segments(pose: Pose, k: Intrinsics, box: BoundingBox3D) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pixel-space endpoints of the 12 box edges after clipping at the camera plane."""
    cam = pose.apply(box.corners)
    out = []
    for i, j in BOX_EDGES:
        seg = _clip_segment(cam[i], cam[j])
        if seg is None:
            continue
        a, b = (_to_pixel(p, k) for p in seg)
        # far off-screen endpoints from near-plane clipping are bounded for drawing
        lim = 8 * max(k.width, k.height)
        out.append((np.clip(a, -lim, lim), np.clip(b, -lim, lim)))
    return out


def draw_box(image: np.ndarray, pose: Pose, k: Intrinsics, box: BoundingBox3D, color) -> np.ndarray:
    img = image.copy()
    H, W = img.shape[:2]
    for a, b in box_edge_segments(pose, k, box):
        px = line_pixels(a, b)
        ok = (px[:, 0] >= 0) & (px[:, 0] < W) & (px[:, 1] >= 0) & (px[:, 1] < H)
        img[px[ok, 1], px[ok, 0]] = color
    return img


def render_overlay(image: np.ndarray, k: Intrinsics, box: BoundingBox3D, gt: Pose, pred: Pose | None) -> np.ndarray:
    """Ground truth in green, prediction in blue (drawn last)."""
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    img = draw_box(img, gt, k, box, GREEN)
    if pred is not None:
        img = draw_box(img, pred, k, box, BLUE)
    return img


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    H, W = img.shape[:2]
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode() + np.ascontiguousarray(img[..., :3]).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    W, H, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    pixels = parts[4]
    return np.frombuffer(pixels[: W * H * 3], dtype=np.uint8).reshape(H, W, 3).copy()
