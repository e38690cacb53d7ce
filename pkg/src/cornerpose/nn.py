"""Reference-conditioned corner heatmap network.

A light patch encoder embeds every view. Reference tokens get their corner
heatmap patches projected and added; query tokens get learned query tokens
added instead. All tokens then run through a stack of pre-norm full
self-attention blocks, and the query tokens are mapped back to heatmap
patches through an affine head and a sigmoid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

REF, QUERY = 0, 1
HEAD_BIAS_INIT = -3.5
QK_INIT_GAIN = 2.0


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 8
    depth: int = 2
    width: int = 64
    heads: int = 4
    image_size: tuple[int, int] = (64, 64)
    n_refs: tuple[int, int] = (1, 5)
    in_channels: int = 3
    mlp_ratio: int = 4

    def __post_init__(self):
        H, W = self.image_size
        if H % self.patch_size or W % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        if not 1 <= self.n_refs[0] <= self.n_refs[1]:
            raise ConfigError(f"bad reference range {self.n_refs}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def sequence_length(self, n_refs: int) -> int:
        return (n_refs + 1) * self.n_tokens

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """(..., H, W, C) -> (..., H/p * W/p, p*p*C); patches row-major, (py, px, c) inside."""
    *lead, H, W, C = x.shape
    if H % p or W % p:
        raise ShapeError(f"({H}, {W}) is not divisible by patch size {p}")
    x = x.reshape(*lead, H // p, p, W // p, p, C)
    x = x.movedim(-4, -3)  # (..., H/p, W/p, p, p, C)
    return x.reshape(*lead, (H // p) * (W // p), p * p * C)


def unpatchify(tokens: torch.Tensor, p: int, size: tuple[int, int]) -> torch.Tensor:
    """Inverse of :func:`patchify`."""
    H, W = size
    *lead, T, D = tokens.shape
    C = D // (p * p)
    if T != (H // p) * (W // p) or C * p * p != D:
        raise ShapeError(f"cannot unpatchify {tuple(tokens.shape)} to {size} with patch {p}")
    x = tokens.reshape(*lead, H // p, W // p, p, p, C).movedim(-3, -4)
    return x.reshape(*lead, H, W, C)


def patchify_heatmap(h, p: int):
    """Heatmap (H, W, 8) -> tokens (H/p * W/p, 8 p^2). Accepts numpy or torch."""
    if isinstance(h, np.ndarray):
        return patchify(torch.from_numpy(np.ascontiguousarray(h)), p).numpy()
    return patchify(h, p)


def unpatchify_heatmap(tokens, p: int, size: tuple[int, int]):
    if isinstance(tokens, np.ndarray):
        return unpatchify(torch.from_numpy(np.ascontiguousarray(tokens)), p, size).numpy()
    return unpatchify(tokens, p, size)


def sincos_2d(gh: int, gw: int, d: int, base: float = 100.0) -> torch.Tensor:
    """(gh * gw, d) sine-cosine table over the patch grid, row-major.

    A quarter of the channels each hold sin/cos of the row and column index at
    geometric frequencies; leftover channels (d not divisible by 4) are zero.
    """
    q = d // 4
    ys, xs = np.mgrid[0:gh, 0:gw]
    freq = base ** (-np.arange(q) / max(q, 1))
    ang_y, ang_x = ys.reshape(-1, 1) * freq, xs.reshape(-1, 1) * freq
    table = np.zeros((gh * gw, d))
    table[:, : 4 * q] = np.concatenate([np.sin(ang_y), np.cos(ang_y), np.sin(ang_x), np.cos(ang_x)], axis=1)
    return torch.from_numpy(table).float()


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    @torch.no_grad()
    def tie_query_key_init(self, gain: float) -> None:
        """Start with keys = queries (scaled by ``gain``), so tokens with similar
        features attend to each other before any training. The weights stay
        independent parameters."""
        D = self.proj.in_features
        w = self.qkv.weight
        w[:D] *= gain
        w[D : 2 * D] = w[:D]

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        B, L, D = x.shape
        hd = D // self.heads
        q, k, v = self.qkv(x).reshape(B, L, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        # key_mask: (B, L) True where the token may be attended to
        mask = None if key_mask is None else key_mask[:, None, None, :]
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.proj(out.transpose(1, 2).reshape(B, L, D))


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, mlp_ratio * width)
        self.fc2 = nn.Linear(mlp_ratio * width, width)

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class CornerNet(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        p, d, T = config.patch_size, config.width, config.n_tokens
        self.patch_proj = nn.Linear(p * p * config.in_channels, d)
        self.encoder = Block(d, config.heads, config.mlp_ratio)
        self.heat_proj = nn.Linear(8 * p * p, d)
        self.query_tokens = nn.Parameter(torch.randn(T, d) * 0.02)
        # learned, but started from a sine-cosine table: with small random
        # starting values a query token cannot find the same-position reference
        # token, and training stalls at an average of the references
        self.pos_embed = nn.Parameter(sincos_2d(*config.grid, d))
        self.segment_embed = nn.Parameter(torch.randn(2, d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth))
        for block in self.blocks:
            block.attn.tie_query_key_init(QK_INIT_GAIN)
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, 8 * p * p)
        # start near the sparse target's mean instead of 0.5 everywhere
        nn.init.constant_(self.head.bias, HEAD_BIAS_INIT)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """(..., H, W, C) images in [0, 1] -> (..., T, d) patch features."""
        cfg = self.config
        if tuple(images.shape[-3:-1]) != tuple(cfg.image_size):
            raise ShapeError(f"image size {tuple(images.shape[-3:-1])} != configured {cfg.image_size}")
        lead = images.shape[:-3]
        tokens = self.patch_proj(patchify(images, cfg.patch_size))
        tokens = tokens.reshape(-1, cfg.n_tokens, cfg.width)
        return self.encoder(tokens).reshape(*lead, cfg.n_tokens, cfg.width)

    def fuse(self, feats: torch.Tensor, heatmaps: torch.Tensor) -> torch.Tensor:
        return feats + self.heat_proj(patchify(heatmaps, self.config.patch_size))

    def forward(self, ref_images, ref_heatmaps, query_images, ref_valid=None, return_logits=False):
        """Predict query heatmaps.

        ref_images (B, N, H, W, C), ref_heatmaps (B, N, H, W, 8),
        query_images (B, H, W, C), optional ref_valid (B, N) bool for padded
        batches. Returns (B, H, W, 8) values in (0, 1).
        """
        cfg = self.config
        B, N = ref_images.shape[:2]
        if not cfg.n_refs[0] <= N <= cfg.n_refs[1]:
            raise ConfigError(f"{N} references outside the configured range {cfg.n_refs}")
        T, d = cfg.n_tokens, cfg.width
        refs = self.fuse(self.embed(ref_images), ref_heatmaps)
        refs = refs + self.pos_embed + self.segment_embed[REF]
        query = self.embed(query_images) + self.query_tokens + self.pos_embed + self.segment_embed[QUERY]
        x = torch.cat([refs.reshape(B, N * T, d), query], dim=1)

        key_mask = None
        if ref_valid is not None:
            key_mask = torch.cat([ref_valid.repeat_interleave(T, dim=1), torch.ones(B, T, dtype=torch.bool)], dim=1)
        for block in self.blocks:
            x = block(x, key_mask)
        logits = self.head(self.norm(x[:, N * T:]))
        logits = unpatchify(logits, cfg.patch_size, cfg.image_size)
        return logits if return_logits else torch.sigmoid(logits)


def build_model(config: ModelConfig = ModelConfig(), seed: int = 0, dtype=torch.float32) -> CornerNet:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = CornerNet(config).to(dtype)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def soft_argmax(heatmaps: torch.Tensor, radius: int | None = 3) -> torch.Tensor:
    """Differentiable corner coordinates from (B, H, W, 8) heatmaps -> (B, 8, 2) as (x, y).

    Same rule as :func:`cornerpose.heatmap.decode_corners`: argmax pixel, then
    the centroid of window values minus the window minimum.
    """
    B, H, W, C = heatmaps.shape
    hm = heatmaps.permute(0, 3, 1, 2).reshape(B, C, H * W)
    idx = hm.detach().argmax(dim=-1)
    row, col = idx // W, idx % W
    if radius is None:
        ys = torch.arange(H, dtype=hm.dtype).repeat_interleave(W)
        xs = torch.arange(W, dtype=hm.dtype).repeat(H)
        w = hm - hm.min(dim=-1, keepdim=True).values
        total = w.sum(-1)
        cx = (w * xs).sum(-1) / total.clamp_min(1e-30)
        cy = (w * ys).sum(-1) / total.clamp_min(1e-30)
    else:
        off = torch.arange(-radius, radius + 1)
        rr = row[..., None, None] + off[:, None]
        cc = col[..., None, None] + off[None, :]
        rr, cc = torch.broadcast_tensors(rr, cc)
        valid = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
        flat = (rr.clamp(0, H - 1) * W + cc.clamp(0, W - 1)).reshape(B, C, -1)
        vals = torch.gather(hm, -1, flat)
        valid = valid.reshape(B, C, -1)
        vmin = vals.masked_fill(~valid, float("inf")).min(dim=-1, keepdim=True).values
        w = (vals - vmin) * valid
        total = w.sum(-1)
        cx = (w * cc.reshape(B, C, -1).to(hm.dtype)).sum(-1) / total.clamp_min(1e-30)
        cy = (w * rr.reshape(B, C, -1).to(hm.dtype)).sum(-1) / total.clamp_min(1e-30)
    has_peak = total > 0
    cx = torch.where(has_peak, cx, col.to(hm.dtype))
    cy = torch.where(has_peak, cy, row.to(hm.dtype))
    return torch.stack([cx, cy], dim=-1)


# ---- single-example helpers over plain arrays ----

def _image_tensor(image, dtype) -> torch.Tensor:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return torch.from_numpy(image.astype(np.float64) / 255.0).to(dtype)
    return torch.as_tensor(image, dtype=dtype)


def patch_embed(image, model: CornerNet) -> np.ndarray:
    """(H, W, C) image -> (H/p, W/p, d) feature grid."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        feats = model.embed(_image_tensor(image, dtype))
    gh, gw = model.config.grid
    return feats.reshape(gh, gw, -1).numpy()


def fuse_reference(feat, h, model: CornerNet) -> np.ndarray:
    """F' = F + Linear(patchify(h)) for one view; ``feat`` is (H/p, W/p, d)."""
    dtype = next(model.parameters()).dtype
    feat = torch.as_tensor(np.asarray(feat), dtype=dtype)
    gh, gw = model.config.grid
    if feat.shape != (gh, gw, model.config.width):
        raise ShapeError(f"feature grid {tuple(feat.shape)} != {(gh, gw, model.config.width)}")
    with torch.no_grad():
        out = model.fuse(feat.reshape(gh * gw, -1), torch.as_tensor(np.asarray(h), dtype=dtype))
    return out.reshape(gh, gw, -1).numpy()


def predict(model: CornerNet, ref_images, ref_heatmaps, query_image) -> np.ndarray:
    """Single-example forward pass over numpy inputs -> (H, W, 8) heatmap."""
    dtype = next(model.parameters()).dtype
    refs = torch.stack([_image_tensor(im, dtype) for im in ref_images])[None]
    hms = torch.as_tensor(np.stack(ref_heatmaps), dtype=dtype)[None]
    q = _image_tensor(query_image, dtype)[None]
    with torch.no_grad():
        return model(refs, hms, q)[0].numpy()


class NumericFailure(FloatingPointError):
    pass


def gradients(loss_fn, batch, model: CornerNet) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss_fn(model, batch)`` for every parameter."""
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model, batch)
    if not torch.isfinite(loss):
        raise NumericFailure(f"non-finite loss {loss.item()}")
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {
        name: torch.zeros_like(p) if g is None else g
        for (name, p), g in zip(params.items(), grads)
    }
