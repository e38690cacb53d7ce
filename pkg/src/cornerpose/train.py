"""Losses, augmentation, batching and the AdamW training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from scipy import ndimage

from .geom3d import BehindCameraError, project_corners, random_unit_vector, rotate_box
from .heatmap import SIGMA_SCALE, WINDOW_RADIUS, encode_heatmap
from .nn import CornerNet, NumericFailure, soft_argmax
from .scene import Scene, View

log = logging.getLogger(__name__)

LAMBDA = 2.0


def smooth_l1(pred, target, beta: float = 1.0):
    """Mean Smooth-L1 over all elements (quadratic below ``beta``)."""
    numpy_in = not isinstance(pred, torch.Tensor)
    pred = torch.as_tensor(pred, dtype=torch.float64) if numpy_in else pred
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = (pred - target).abs()
    loss = torch.where(diff < beta, 0.5 * diff**2 / beta, diff - 0.5 * beta).mean()
    return float(loss) if numpy_in else loss


def normalize_corners(corners, size: tuple[int, int]):
    """Pixel (x, y) -> [0, 1] by dividing by (W, H)."""
    H, W = size
    scale = torch.tensor([W, H], dtype=corners.dtype) if isinstance(corners, torch.Tensor) else np.array([W, H], float)
    return corners / scale


def _masked_smooth_l1(pred, target, mask, beta: float = 1.0):
    diff = (pred - target).abs()
    per = torch.where(diff < beta, 0.5 * diff**2 / beta, diff - 0.5 * beta)
    return (per * mask[..., None]).mean()


def loss_total(pred_hm, gt_hm, pred_corners, gt_corners, lam: float = LAMBDA, size=None, fine_mask=None):
    """``L = L_coarse + lam * L_fine``; returns (total, {"coarse", "fine"}).

    Corners are pixel coordinates; they are normalized by ``size = (H, W)``
    (taken from the heatmap when omitted) before the fine term. ``fine_mask``
    (one 0/1 weight per corner) drops corners from the fine term while keeping
    the mean over all 8.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if size is None:
        size = tuple(np.shape(gt_hm)[-3:-1])
    coarse = smooth_l1(pred_hm, gt_hm)
    pc, gc = normalize_corners(pred_corners, size), normalize_corners(gt_corners, size)
    if fine_mask is None:
        fine = smooth_l1(pc, gc)
    else:
        fine = _masked_smooth_l1(pc, torch.as_tensor(gc, dtype=pc.dtype), torch.as_tensor(fine_mask, dtype=pc.dtype))
    return coarse + lam * fine, {"coarse": coarse, "fine": fine}


def corner_gate(pred_hm: torch.Tensor, gt_corners: torch.Tensor, radius: int = WINDOW_RADIUS) -> torch.Tensor:
    """1 where the predicted argmax pixel lies within the soft-argmax window of
    the true corner, else 0. Shape (B, 8)."""
    B, H, W, C = pred_hm.shape
    idx = pred_hm.detach().permute(0, 3, 1, 2).reshape(B, C, H * W).argmax(-1)
    peak = torch.stack([idx % W, idx // W], dim=-1).to(gt_corners.dtype)
    return ((peak - gt_corners).abs().amax(-1) <= radius).to(pred_hm.dtype)


def cosine_lr(step: int, total_steps: int, lr: float, floor: float = 0.0) -> float:
    """Cosine decay from ``lr`` at step 0 to ``floor`` at the last step."""
    if total_steps <= 1:
        return lr
    frac = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return floor + 0.5 * (lr - floor) * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class AugConfig:
    rotate_prob: float = 0.5
    occlude_prob: float = 0.3
    max_occlusion: float = 0.3
    noise_prob: float = 0.3
    noise_std: float = 0.04
    blur_prob: float = 0.2
    background_prob: float = 0.5

    @classmethod
    def none(cls) -> AugConfig:
        return cls(0.0, 0.0, 0.3, 0.0, 0.04, 0.0, 0.0)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-4
    lr_floor: float = 0.0
    weight_decay: float = 0.01
    lam: float = LAMBDA
    sigma_scale: float = SIGMA_SCALE
    seed: int = 0
    random_refs: bool = True
    fine_gate: bool = True
    aug: AugConfig = field(default_factory=AugConfig)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "aug" in d:
            d["aug"] = AugConfig(**d["aug"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---- augmentation ----

def _procedural_background(rng, H, W) -> np.ndarray:
    ys, xs = np.mgrid[0:H, 0:W] / max(H, W)
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xs + np.sin(theta) * ys)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    bg = c0 + (c1 - c0) * ramp[..., None]
    blobs = ndimage.gaussian_filter(rng.normal(size=(H, W)), sigma=rng.uniform(1.0, 4.0))
    blobs /= max(np.abs(blobs).max(), 1e-9)
    return np.clip(bg + 0.25 * blobs[..., None] * rng.uniform(-1, 1, 3), 0, 1)


def _motion_blur(img: np.ndarray, rng) -> np.ndarray:
    length = int(rng.choice([3, 5]))
    kernel = np.zeros((length, length))
    kind = int(rng.integers(4))
    if kind == 0:
        kernel[length // 2, :] = 1
    elif kind == 1:
        kernel[:, length // 2] = 1
    elif kind == 2:
        np.fill_diagonal(kernel, 1)
    else:
        np.fill_diagonal(np.fliplr(kernel), 1)
    kernel /= kernel.sum()
    return np.stack([ndimage.convolve(img[..., c], kernel, mode="nearest") for c in range(img.shape[-1])], -1)


def _u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def occlude(view: View, rng: np.random.Generator, fraction: float) -> View:
    """Paint a random rectangle covering about ``fraction`` of the silhouette area."""
    H, W = view.silhouette.shape
    rows, cols = np.nonzero(view.silhouette)
    if len(rows) == 0 or fraction <= 0:
        return view
    target = fraction * len(rows)
    aspect = rng.uniform(0.5, 2.0)
    h = max(1, int(round(math.sqrt(target / aspect))))
    w = max(1, int(round(target / h)))
    i = int(rng.integers(len(rows)))
    r0 = int(np.clip(rows[i] - h // 2, 0, max(H - h, 0)))
    c0 = int(np.clip(cols[i] - w // 2, 0, max(W - w, 0)))
    img = view.image.astype(np.float64) / 255.0
    patch = rng.uniform(0, 1, 3) + 0.1 * rng.normal(size=(min(h, H - r0), min(w, W - c0), 3))
    img[r0:r0 + h, c0:c0 + w] = np.clip(patch, 0, 1)
    return replace(view, image=_u8(img))


def augment_sample(scene: Scene, rng: np.random.Generator, cfg: AugConfig = AugConfig()) -> Scene:
    """Randomly rotated box, occluders, backgrounds, pixel noise and blur.

    The box rotation replaces ``scene.box``; everything derived from the box
    (ground-truth corners, reference heatmaps) is recomputed from it.
    """
    box = scene.box
    if rng.uniform() < cfg.rotate_prob:
        views = [scene.query, *scene.references]
        for _ in range(100):
            cand = rotate_box(box, random_unit_vector(rng), rng.uniform(-np.pi, np.pi))
            try:
                for v in views:
                    project_corners(v.pose, scene.intrinsics, cand)
            except BehindCameraError:
                continue
            box = cand
            break

    def photometric(view: View, is_query: bool) -> View:
        img = None
        if rng.uniform() < cfg.background_prob:
            img = view.image.astype(np.float64) / 255.0
            bg = _procedural_background(rng, *view.silhouette.shape)
            img = np.where(view.silhouette[..., None], img, bg)
        if is_query and rng.uniform() < cfg.occlude_prob:
            if img is not None:
                view = replace(view, image=_u8(img))
            view = occlude(view, rng, rng.uniform(0.0, cfg.max_occlusion))
            img = None
        if rng.uniform() < cfg.blur_prob:
            img = _motion_blur(view.image.astype(np.float64) / 255.0 if img is None else img, rng)
        if rng.uniform() < cfg.noise_prob:
            base = view.image.astype(np.float64) / 255.0 if img is None else img
            img = base + rng.normal(0.0, rng.uniform(0.0, cfg.noise_std), size=base.shape)
        return view if img is None else replace(view, image=_u8(img))

    query = photometric(scene.query, True)
    refs = [photometric(v, False) for v in scene.references]
    return replace(scene, box=box, query=query, references=refs)


# ---- batching ----

@dataclass
class Sample:
    ref_images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    ref_heatmaps: np.ndarray  # (N, H, W, 8)
    query_image: np.ndarray  # (H, W, 3)
    gt_heatmap: np.ndarray  # (H, W, 8)
    gt_corners: np.ndarray  # (8, 2)


def view_heatmap(scene: Scene, view: View, sigma_scale: float = SIGMA_SCALE) -> np.ndarray:
    uv = project_corners(view.pose, scene.intrinsics, scene.box)
    return encode_heatmap(uv, scene.size, sigma_scale=sigma_scale, dtype=np.float32)


def make_sample(scene: Scene, sigma_scale: float = SIGMA_SCALE) -> Sample:
    refs = scene.references
    return Sample(
        ref_images=np.stack([v.image for v in refs]).astype(np.float32) / 255.0,
        ref_heatmaps=np.stack([view_heatmap(scene, v, sigma_scale) for v in refs]),
        query_image=scene.query.image.astype(np.float32) / 255.0,
        gt_heatmap=view_heatmap(scene, scene.query, sigma_scale),
        gt_corners=scene.gt_corners2d.points.astype(np.float32),
    )


@dataclass
class Batch:
    ref_images: torch.Tensor
    ref_heatmaps: torch.Tensor
    ref_valid: torch.Tensor
    query_images: torch.Tensor
    gt_heatmaps: torch.Tensor
    gt_corners: torch.Tensor

    def to(self, dtype) -> Batch:
        return Batch(*(t.to(dtype) if t.is_floating_point() else t for t in
                       (self.ref_images, self.ref_heatmaps, self.ref_valid,
                        self.query_images, self.gt_heatmaps, self.gt_corners)))


def collate(samples: Sequence[Sample]) -> Batch:
    """Stack samples, padding references to the largest count in the batch."""
    if not samples:
        raise ValueError("empty batch")
    n = max(len(s.ref_images) for s in samples)
    B = len(samples)
    H, W = samples[0].query_image.shape[:2]
    ref_images = np.zeros((B, n, H, W, 3), np.float32)
    ref_heatmaps = np.zeros((B, n, H, W, 8), np.float32)
    valid = np.zeros((B, n), bool)
    for b, s in enumerate(samples):
        m = len(s.ref_images)
        ref_images[b, :m] = s.ref_images
        ref_heatmaps[b, :m] = s.ref_heatmaps
        valid[b, :m] = True
    return Batch(
        torch.from_numpy(ref_images),
        torch.from_numpy(ref_heatmaps),
        torch.from_numpy(valid),
        torch.from_numpy(np.stack([s.query_image for s in samples])),
        torch.from_numpy(np.stack([s.gt_heatmap for s in samples])),
        torch.from_numpy(np.stack([s.gt_corners for s in samples])),
    )


def batch_loss(model: CornerNet, batch: Batch, lam: float = LAMBDA, gate: bool = True):
    """Training objective on a batch.

    With ``gate`` the fine term only sees corners whose predicted peak is
    already inside the refinement window; far-off peaks are left to the coarse
    term, whose signal the window-local gradient would otherwise drown out.
    """
    valid = None if bool(batch.ref_valid.all()) else batch.ref_valid
    pred = model(batch.ref_images, batch.ref_heatmaps, batch.query_images, valid)
    corners = soft_argmax(pred)
    mask = corner_gate(pred, batch.gt_corners) if gate else None
    return loss_total(pred, batch.gt_heatmaps, corners, batch.gt_corners, lam, size=tuple(pred.shape[1:3]), fine_mask=mask)


# ---- optimization ----

def make_optimizer(model: CornerNet, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def train_step(model: CornerNet, opt: torch.optim.Optimizer, batch: Batch, step: int, cfg: TrainConfig) -> dict:
    """One AdamW update at the cosine-scheduled rate; returns the loss record."""
    lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_floor)
    for group in opt.param_groups:
        group["lr"] = lr
    opt.zero_grad(set_to_none=True)
    total, parts = batch_loss(model, batch, cfg.lam, cfg.fine_gate)
    if not torch.isfinite(total):
        raise NumericFailure(f"non-finite loss at step {step}: coarse={parts['coarse'].item()} fine={parts['fine'].item()}")
    total.backward()
    opt.step()
    return {"step": step, "lr": lr, "coarse": parts["coarse"].item(), "fine": parts["fine"].item(), "total": total.item()}


def sample_batch(scenes: Sequence[Scene], step: int, cfg: TrainConfig, n_refs: tuple[int, int]) -> Batch:
    rng = np.random.default_rng([cfg.seed, step])
    samples = []
    for i in rng.integers(len(scenes), size=cfg.batch_size):
        scene = scenes[int(i)]
        avail = len(scene.references)
        if cfg.random_refs:
            hi = min(n_refs[1], avail)
            n = int(rng.integers(min(n_refs[0], hi), hi + 1))
            scene = scene.with_references(sorted(rng.choice(avail, size=n, replace=False)))
        else:
            scene = scene.with_references(range(min(avail, n_refs[1])))
        scene = augment_sample(scene, rng, cfg.aug)
        samples.append(make_sample(scene, cfg.sigma_scale))
    return collate(samples)


def train(scenes: Sequence[Scene], model: CornerNet, cfg: TrainConfig,
          on_step: Callable[[dict], None] | None = None) -> list[dict]:
    """Run ``cfg.steps`` updates; returns the per-step loss records.

    NumericFailure propagates with the model left at its last finite state.
    """
    if not scenes:
        raise ValueError("no training scenes")
    torch.manual_seed(cfg.seed)
    opt = make_optimizer(model, cfg)
    records = []
    for step in range(cfg.steps):
        batch = sample_batch(scenes, step, cfg, model.config.n_refs)
        rec = train_step(model, opt, batch, step, cfg)
        records.append(rec)
        if on_step is not None:
            on_step(rec)
        if step % 100 == 0 or step == cfg.steps - 1:
            log.info("step %d lr %.3g coarse %.5f fine %.5f total %.5f", step, rec["lr"], rec["coarse"], rec["fine"], rec["total"])
    return records


def iter_loss_rows(records: Iterable[dict]):
    for r in records:
        yield (r["step"], r["lr"], r["coarse"], r["fine"], r["total"])
