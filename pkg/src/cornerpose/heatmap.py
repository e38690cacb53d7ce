"""Corner heatmap codec.

Each of the 8 box corners gets its own channel whose value decays with the
plain (unsquared) pixel distance to the corner::

    H(x, y, i) = exp(-d_i(x, y) / (2 sigma^2))

Heatmaps are (H, W, 8), row-major, channel-last.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_SCALE = 0.1
WINDOW_RADIUS = 3
# a channel whose total variation is below this is treated as carrying no peak
FLAT_TOL = 1e-12


class ZeroSizeError(ValueError):
    pass


@dataclass(frozen=True)
class Corners2D:
    points: np.ndarray
    visibility: np.ndarray

    @classmethod
    def from_points(cls, points, size: tuple[int, int]) -> Corners2D:
        """Build with visibility = inside the ``size = (H, W)`` pixel grid."""
        points = np.asarray(points, dtype=float).reshape(8, 2)
        H, W = size
        vis = (points[:, 0] >= -0.5) & (points[:, 0] <= W - 0.5) & (points[:, 1] >= -0.5) & (points[:, 1] <= H - 0.5)
        return cls(points, vis)


def _as_points(corners) -> np.ndarray:
    if isinstance(corners, Corners2D):
        corners = corners.points
    return np.asarray(corners, dtype=float).reshape(-1, 2)


def object_sigma(corners, scale: float = SIGMA_SCALE) -> float:
    """``scale`` times the mean pixel distance of the corners to their centroid."""
    pts = _as_points(corners)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    if len(pts) == 0:
        raise ZeroSizeError("no finite corner")
    size = np.linalg.norm(pts - pts.mean(axis=0), axis=1).mean()
    if not size > 0:
        raise ZeroSizeError("all corners coincide")
    return float(scale * size)


def encode_heatmap(corners, size: tuple[int, int], sigma: float | None = None,
                   sigma_scale: float = SIGMA_SCALE, dtype=np.float64) -> np.ndarray:
    """Render the (H, W, 8) heatmap of the corners over the full pixel grid.

    Corners outside the image still contribute their tail. ``sigma`` defaults to
    :func:`object_sigma` of the corners.
    """
    pts = _as_points(corners)
    if sigma is None:
        sigma = object_sigma(pts, sigma_scale)
    H, W = size
    if H < 1 or W < 1:
        raise ValueError(f"bad heatmap size {size}")
    ys = np.arange(H, dtype=np.float64)[:, None, None]
    xs = np.arange(W, dtype=np.float64)[None, :, None]
    d = np.sqrt((xs - pts[:, 0]) ** 2 + (ys - pts[:, 1]) ** 2)
    return np.exp(-d / (2.0 * sigma * sigma)).astype(dtype, copy=False)


def _window_centroid(channel: np.ndarray, row: int, col: int, radius: int | None) -> tuple[float, float]:
    H, W = channel.shape
    if radius is None:
        r0, r1, c0, c1 = 0, H, 0, W
    else:
        r0, r1 = max(0, row - radius), min(H, row + radius + 1)
        c0, c1 = max(0, col - radius), min(W, col + radius + 1)
    win = channel[r0:r1, c0:c1]
    w = win - win.min()
    total = w.sum()
    if not total > 0:
        return float(col), float(row)
    ys, xs = np.mgrid[r0:r1, c0:c1]
    return float((w * xs).sum() / total), float((w * ys).sum() / total)


def decode_corners(h, window_radius: int | None = WINDOW_RADIUS) -> tuple[Corners2D, np.ndarray]:
    """Sub-pixel corner locations and peak confidences from a heatmap.

    Per channel: take the argmax pixel (first in row-major order on ties),
    then the centroid of the window values minus the window minimum. Pass
    ``window_radius=None`` to use the whole map instead of a local window.

    Flat channels (including all-zero ones) decode to the image center with
    zero confidence and are flagged not visible.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 3 or h.shape[2] != 8:
        raise ValueError(f"expected an (H, W, 8) heatmap, got {h.shape}")
    H, W, _ = h.shape
    points = np.empty((8, 2))
    conf = np.empty(8)
    flat = np.zeros(8, dtype=bool)
    for i in range(8):
        ch = h[:, :, i]
        peak = ch.max()
        if peak - ch.min() <= FLAT_TOL:
            points[i] = ((W - 1) / 2, (H - 1) / 2)
            conf[i] = 0.0
            flat[i] = True
            continue
        row, col = divmod(int(np.argmax(ch)), W)
        points[i] = _window_centroid(ch, row, col, window_radius)
        conf[i] = float(np.clip(peak, 0.0, 1.0))
    corners = Corners2D.from_points(points, (H, W))
    return Corners2D(corners.points, corners.visibility & ~flat), conf
