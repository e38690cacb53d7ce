"""Pose from 2D-3D box corner correspondences: linear DLT + LM refinement."""

from __future__ import annotations

import numpy as np

from .geom3d import BoundingBox3D, Intrinsics, Pose, rodrigues, skew
from .heatmap import Corners2D

RANK_TOL = 1e-10
MAX_ITERS = 100
COST_TOL = 1e-12
STEP_TOL = 1e-12


class PnPError(ValueError):
    pass


class DegenerateConfigurationError(PnPError):
    pass


class InsufficientCorrespondencesError(PnPError):
    pass


class NumericFailureError(PnPError):
    pass


def _weights(weights, n):
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float).reshape(n)
    if np.any(w < 0):
        raise PnPError("correspondence weights must be non-negative")
    return w


def _spread_ratio(x: np.ndarray) -> float:
    s = np.linalg.svd(x - x.mean(axis=0), compute_uv=False)
    return s[-1] / s[0] if s[0] > 0 else 0.0


def solve_pnp_dlt(points3d, points2d, k: Intrinsics, weights=None) -> Pose:
    """Direct linear transform estimate of ``[R | t]``.

    Works in normalized camera coordinates with the 3D points centered and
    scaled, then projects the 3x3 block to the nearest rotation.
    """
    X = np.asarray(points3d, dtype=float).reshape(-1, 3)
    x = np.asarray(points2d, dtype=float).reshape(-1, 2)
    n = len(X)
    if n < 6 or len(x) != n:
        raise InsufficientCorrespondencesError(f"DLT needs at least 6 correspondences, got {n}")
    w = _weights(weights, n)
    if _spread_ratio(X) < RANK_TOL:
        raise DegenerateConfigurationError("3D points are coplanar or collinear")
    if _spread_ratio(x) < RANK_TOL:
        raise DegenerateConfigurationError("image points are collinear")

    xn = np.column_stack([(x[:, 0] - k.cx) / k.fx, (x[:, 1] - k.cy) / k.fy])
    c = X.mean(axis=0)
    s = np.sqrt(((X - c) ** 2).sum(axis=1).mean())
    Xh = np.column_stack([(X - c) / s, np.ones(n)])

    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, :1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xn[:, 1:] * Xh
    A *= np.repeat(np.sqrt(w), 2)[:, None]
    _, sv, Vt = np.linalg.svd(A)
    if sv[0] == 0 or sv[10] / sv[0] < RANK_TOL:
        raise DegenerateConfigurationError("DLT design matrix is rank deficient")
    P = Vt[-1].reshape(3, 4)
    # undo the 3D normalization: P_world = P_norm @ T
    T = np.eye(4)
    T[:3, :3] /= s
    T[:3, 3] = -c / s
    P = P @ T

    depth = np.column_stack([X, np.ones(n)]) @ P[2]
    if np.sum(depth > 0) < n / 2:
        P = -P
    U, S, Vt3 = np.linalg.svd(P[:, :3])
    R = U @ Vt3
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt3
    scale = S.mean()
    if not scale > 0:
        raise DegenerateConfigurationError("DLT produced a null projection block")
    t = P[:, 3] / scale
    return Pose(R, t)


def _residuals(pose_R, pose_t, X, x, k, sw):
    pc = X @ pose_R.T + pose_t
    z = pc[:, 2]
    proj = np.column_stack([k.fx * pc[:, 0] / z + k.cx, k.fy * pc[:, 1] / z + k.cy])
    return ((proj - x) * sw[:, None]).ravel(), pc


def _cost(r):
    return float(r @ r)


def _rms(cost, w):
    return float(np.sqrt(cost / w.sum())) if w.sum() > 0 else 0.0


def refine_pnp_lm(init: Pose, points3d, points2d, k: Intrinsics, weights=None,
                  max_iters: int = MAX_ITERS) -> tuple[Pose, float]:
    """Levenberg-Marquardt on the weighted squared reprojection error.

    The local update is ``R <- exp([w]) R``, ``t <- t + dt``. Only steps that
    lower the cost are accepted, so the result is never worse than ``init``.
    Returns the refined pose and the weighted RMS reprojection error in pixels.
    """
    X = np.asarray(points3d, dtype=float).reshape(-1, 3)
    x = np.asarray(points2d, dtype=float).reshape(-1, 2)
    n = len(X)
    if n < 4 or len(x) != n:
        raise InsufficientCorrespondencesError(f"LM refinement needs at least 4 correspondences, got {n}")
    w = _weights(weights, n)
    sw = np.sqrt(w)
    R, t = init.rotation.copy(), init.translation.copy()

    r, pc = _residuals(R, t, X, x, k, sw)
    if not np.all(np.isfinite(r)):
        raise NumericFailureError("non-finite residuals at the initial pose")
    if np.any(pc[:, 2] <= 0):
        raise NumericFailureError(f"initial pose puts {int(np.sum(pc[:, 2] <= 0))} point(s) behind the camera")
    cost = _cost(r)
    mu = None
    for _ in range(max_iters):
        if cost == 0.0:
            break
        z = pc[:, 2]
        # d(proj)/d(pc), stacked per point as (n, 2, 3)
        dproj = np.zeros((n, 2, 3))
        dproj[:, 0, 0] = k.fx / z
        dproj[:, 0, 2] = -k.fx * pc[:, 0] / z**2
        dproj[:, 1, 1] = k.fy / z
        dproj[:, 1, 2] = -k.fy * pc[:, 1] / z**2
        rX = X @ R.T
        dpc = np.zeros((n, 3, 6))
        dpc[:, :, :3] = -np.stack([skew(v) for v in rX])
        dpc[:, :, 3:] = np.eye(3)
        J = (np.einsum("nij,njk->nik", dproj, dpc) * sw[:, None, None]).reshape(2 * n, 6)
        JtJ = J.T @ J
        g = J.T @ r
        if mu is None:
            mu = 1e-4 * max(np.diag(JtJ).max(), 1e-12)
        improved = False
        while mu < 1e32:
            try:
                step = -np.linalg.solve(JtJ + mu * np.eye(6), g)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            R_new = rodrigues(step[:3]) @ R
            t_new = t + step[3:]
            r_new, pc_new = _residuals(R_new, t_new, X, x, k, sw)
            if np.all(np.isfinite(r_new)) and np.all(pc_new[:, 2] > 0):
                cost_new = _cost(r_new)
                if cost_new < cost:
                    improved = True
                    break
            mu *= 10
            if np.linalg.norm(step) < STEP_TOL:
                break
        if not improved:
            break
        rel_decrease = (cost - cost_new) / cost
        R, t, r, pc, cost = R_new, t_new, r_new, pc_new, cost_new
        mu = max(mu / 10, 1e-20)
        if rel_decrease < COST_TOL or np.linalg.norm(step) < STEP_TOL:
            break

    return Pose(R, t), _rms(cost, w)


def reprojection_rms(pose: Pose, points3d, points2d, k: Intrinsics, weights=None) -> float:
    X = np.asarray(points3d, dtype=float).reshape(-1, 3)
    x = np.asarray(points2d, dtype=float).reshape(-1, 2)
    w = _weights(weights, len(X))
    r, _ = _residuals(pose.rotation, pose.translation, X, x, k, np.sqrt(w))
    return _rms(_cost(r), w)


def estimate_pose(corners2d, confidence, box: BoundingBox3D, k: Intrinsics,
                  min_conf: float = 0.0, weighted: bool = True) -> tuple[Pose, float]:
    """Pose from decoded corners: confidence gating, DLT, then weighted LM.

    Returns ``(pose, rms_reproj)``.
    """
    pts = corners2d.points if isinstance(corners2d, Corners2D) else np.asarray(corners2d, dtype=float)
    pts = pts.reshape(8, 2)
    conf = np.asarray(confidence, dtype=float).reshape(8)
    keep = (conf >= min_conf) & np.all(np.isfinite(pts), axis=1)
    if keep.sum() < 6:
        raise InsufficientCorrespondencesError(
            f"only {int(keep.sum())} corners reach confidence {min_conf}; at least 6 are needed")
    w = conf[keep] if weighted else np.ones(int(keep.sum()))
    X, x = box.corners[keep], pts[keep]
    init = solve_pnp_dlt(X, x, k, w)
    return refine_pnp_lm(init, X, x, k, w)
