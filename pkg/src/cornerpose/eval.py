"""Pose error metrics, AUC, reference selection and the per-scene evaluation pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geom3d import GeometryError, Pose, filter_points, fit_bounding_box, project_points
from .heatmap import SIGMA_SCALE, decode_corners, encode_heatmap
from .pnp import PnPError, estimate_pose

ADD_FRACTION = 0.1
PROJ2D_PX = 5.0
AUC_MAX = 0.10


def _points(points) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        raise ValueError("metric needs at least one model point")
    return pts


def _mean(values) -> float:
    return math.fsum(values) / len(values)


def add_metric(gt: Pose, pred: Pose, points) -> float:
    """Mean distance between corresponding points under the two poses."""
    pts = _points(points)
    d = gt.apply(pts) - pred.apply(pts)
    return _mean(np.sqrt((d * d).sum(axis=1)))


def nearest_distances(a: np.ndarray, b: np.ndarray, chunk: int = 512) -> np.ndarray:
    """For every row of ``a``, the distance to the nearest row of ``b``."""
    out = np.empty(len(a))
    for i in range(0, len(a), chunk):
        d = a[i:i + chunk, None, :] - b[None, :, :]
        out[i:i + chunk] = np.sqrt((d * d).sum(axis=2).min(axis=1))
    return out


def adds_metric(gt: Pose, pred: Pose, points) -> float:
    """Mean distance from each gt-posed point to the nearest pred-posed point."""
    pts = _points(points)
    return _mean(nearest_distances(gt.apply(pts), pred.apply(pts)))


def proj2d_metric(gt: Pose, pred: Pose, points, k) -> float:
    pts = _points(points)
    d = project_points(gt, k, pts) - project_points(pred, k, pts)
    return _mean(np.sqrt((d * d).sum(axis=1)))


def auc(errors, max_threshold: float = AUC_MAX) -> float:
    """Normalized area under accuracy(t) = P(error <= t) for t in [0, max_threshold].

    Each error e contributes (max_threshold - e) / max_threshold when below the
    threshold, so the integral is exact; infinite errors contribute nothing.
    """
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("auc of an empty error list")
    if not max_threshold > 0:
        raise ValueError("max_threshold must be positive")
    e = np.where(np.isnan(e), np.inf, e)
    return float(np.clip(max_threshold - e, 0.0, None).sum() / (e.size * max_threshold))


def fps_sample(poses: Sequence[Pose], k: int) -> list[int]:
    """Greedy farthest point sampling over camera centers, seeded at index 0."""
    n = len(poses)
    if not 1 <= k <= n:
        raise ValueError(f"cannot pick {k} of {n} poses")
    centers = np.stack([p.center for p in poses])
    chosen = [0]
    mind = np.linalg.norm(centers - centers[0], axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(mind))  # first index on ties
        chosen.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(centers - centers[nxt], axis=1))
    return chosen


def pooled(feat) -> np.ndarray:
    f = np.asarray(feat, dtype=float)
    return f.reshape(-1, f.shape[-1]).mean(axis=0) if f.ndim > 1 else f


def cosine_similarities(query_feat, ref_feats) -> np.ndarray:
    q = pooled(query_feat)
    qn = np.linalg.norm(q)
    if qn == 0:
        raise ValueError("query feature has zero norm")
    sims = []
    for i, f in enumerate(ref_feats):
        r = pooled(f)
        rn = np.linalg.norm(r)
        if rn == 0:
            raise ValueError(f"reference feature {i} has zero norm")
        sims.append(float(q @ r / (qn * rn)))
    return np.array(sims)


def select_neighbors(query_feat, ref_feats, k: int) -> list[int]:
    """Top-k references by cosine similarity of mean-pooled features."""
    if not 1 <= k <= len(ref_feats):
        raise ValueError(f"cannot pick {k} of {len(ref_feats)} references")
    sims = cosine_similarities(query_feat, ref_feats)
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))
    return order[:k]


# ---- per-scene pipeline ----

@dataclass
class SceneResult:
    scene_id: str
    add: float
    adds: float
    proj2d: float
    diameter: float
    symmetric: bool
    corner_err: float = math.inf  # median decoded-corner pixel error
    refs: list[int] = field(default_factory=list)
    error: str = ""

    @property
    def add_ok(self) -> bool:
        return self.add < ADD_FRACTION * self.diameter

    @property
    def adds_ok(self) -> bool:
        return self.adds < ADD_FRACTION * self.diameter

    @property
    def add_s_ok(self) -> bool:
        return self.adds_ok if self.symmetric else self.add_ok

    @property
    def proj2d_ok(self) -> bool:
        return self.proj2d < PROJ2D_PX


@dataclass
class MetricReport:
    rows: list[SceneResult]

    def aggregates(self) -> dict[str, float]:
        n = len(self.rows)
        if n == 0:
            return {k: 0.0 for k in ("add_0.1d", "adds_0.1d", "add(s)_0.1d", "proj2d_5px", "add_auc", "adds_auc", "median_corner_px", "failures")}
        corner = [r.corner_err for r in self.rows]
        return {
            "add_0.1d": sum(r.add_ok for r in self.rows) / n,
            "adds_0.1d": sum(r.adds_ok for r in self.rows) / n,
            "add(s)_0.1d": sum(r.add_s_ok for r in self.rows) / n,
            "proj2d_5px": sum(r.proj2d_ok for r in self.rows) / n,
            "add_auc": auc([r.add for r in self.rows]),
            "adds_auc": auc([r.adds for r in self.rows]),
            "median_corner_px": float(np.median(corner)),
            "failures": float(sum(bool(r.error) for r in self.rows)),
        }


def select_references(scene, n_refs: int, selection: str, model=None, pool: int = 15) -> list[int]:
    """Indices into ``scene.references``.

    ``fps``: farthest point sampling of ``n_refs`` views. ``neighbors``: FPS
    down to ``pool`` views, then the ``n_refs`` most feature-similar to the
    query. ``all``: every reference.
    """
    total = len(scene.references)
    if n_refs < 1:
        raise ValueError("n_refs must be at least 1")
    if selection == "all":
        return list(range(total))
    if n_refs > total:
        raise ValueError(f"scene has {total} references, {n_refs} requested")
    poses = [v.pose for v in scene.references]
    if selection == "fps":
        return fps_sample(poses, n_refs)
    if selection == "neighbors":
        cand = fps_sample(poses, max(n_refs, min(pool, total)))
        if model is None:
            return cand[:n_refs]
        from .nn import patch_embed

        q = patch_embed(scene.query.image, model)
        feats = [patch_embed(scene.references[i].image, model) for i in cand]
        return [cand[i] for i in select_neighbors(q, feats, n_refs)]
    raise ValueError(f"unknown selection {selection!r}")


def reconstruct_box(scene, ref_idx, cloud_noise: float = 0.0, rng=None):
    """Box and centroid from the cloud filtered by the selected reference masks."""
    cloud = scene.cloud
    if cloud_noise > 0:
        rng = rng or np.random.default_rng(0)
        cloud = cloud + rng.normal(0.0, cloud_noise, size=cloud.shape)
    views = [(scene.references[i].pose, scene.intrinsics, scene.references[i].mask) for i in ref_idx]
    return fit_bounding_box(filter_points(cloud, views))


def evaluate_scene(scene, scene_id: str, model=None, n_refs: int = 5, selection: str = "fps",
                   min_conf: float = 0.0, sigma_scale: float = SIGMA_SCALE, cloud_noise: float = 0.0,
                   rng=None) -> SceneResult:
    """Run selection -> box recovery -> heatmap -> decode -> PnP -> metrics.

    With ``model=None`` the network is bypassed and the query heatmap is
    encoded from the ground-truth projection of the recovered box. Pose
    failures score infinite error instead of raising.
    """
    from .nn import predict
    from .train import view_heatmap

    gt = scene.query.pose
    k = scene.intrinsics
    res = SceneResult(scene_id, math.inf, math.inf, math.inf, scene.diameter, scene.symmetric)
    try:
        idx = select_references(scene, n_refs, selection, model)
        res.refs = list(idx)
        box, centroid = reconstruct_box(scene, idx, cloud_noise, rng)
        # everything below lives in the recovered box frame
        local = scene.with_references(idx)
        local.box = box
        local.query = _recentered_view(scene.query, centroid)
        local.references = [_recentered_view(v, centroid) for v in local.references]
        gt_uv = project_points(local.query.pose, k, box.corners)
        if model is None:
            hm = encode_heatmap(gt_uv, scene.size, sigma_scale=sigma_scale)
        else:
            ref_imgs = [v.image for v in local.references]
            ref_hms = [view_heatmap(local, v, sigma_scale) for v in local.references]
            hm = predict(model, ref_imgs, ref_hms, local.query.image)
        corners, conf = decode_corners(hm)
        res.corner_err = float(np.median(np.linalg.norm(corners.points - gt_uv, axis=1)))
        pose_local, _ = estimate_pose(corners, conf, box, k, min_conf)
        pred = Pose(pose_local.rotation, pose_local.translation - pose_local.rotation @ centroid)
        res.add = add_metric(gt, pred, scene.cloud)
        res.adds = adds_metric(gt, pred, scene.cloud)
        try:
            res.proj2d = proj2d_metric(gt, pred, scene.cloud, k)
        except GeometryError:
            res.proj2d = math.inf
    except (GeometryError, PnPError, np.linalg.LinAlgError) as err:
        res.error = f"{type(err).__name__}: {err}"
    return res


def _recentered_view(view, centroid):
    from dataclasses import replace

    return replace(view, pose=view.pose.recentered(centroid))
