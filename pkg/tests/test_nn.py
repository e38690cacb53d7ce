import numpy as np
import pytest
import torch

from cornerpose.nn import (
    HEAD_BIAS_INIT,
    ConfigError,
    ModelConfig,
    NumericFailure,
    ShapeError,
    build_model,
    fuse_reference,
    gradients,
    patch_embed,
    patchify_heatmap,
    predict,
    sincos_2d,
    soft_argmax,
    unpatchify_heatmap,
)

TINY = ModelConfig(patch_size=8, depth=1, width=8, heads=2, image_size=(16, 16), n_refs=(1, 3))


def inputs(cfg, n, seed=0, batch=1, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    H, W = cfg.image_size
    return (
        torch.rand(batch, n, H, W, 3, generator=g, dtype=dtype),
        torch.rand(batch, n, H, W, 8, generator=g, dtype=dtype),
        torch.rand(batch, H, W, 3, generator=g, dtype=dtype),
    )


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(patch_size=7, image_size=(64, 64))
    with pytest.raises(ConfigError):
        ModelConfig(width=10, heads=4)
    assert ModelConfig.from_dict(TINY.to_dict()) == TINY


def test_sequence_length_arithmetic():
    cfg = ModelConfig()
    assert cfg.grid == (8, 8)
    assert cfg.sequence_length(2) == 192


def test_patchify_heatmap_token_shape_and_roundtrip():
    h = np.random.default_rng(0).random((28, 28, 8))
    tok = patchify_heatmap(h, 14)
    assert tok.shape == (4, 8 * 196)
    np.testing.assert_array_equal(unpatchify_heatmap(tok, 14, (28, 28)), h)
    const = patchify_heatmap(np.full((16, 16, 8), 0.3), 8)
    assert np.all(const == const[0])
    with pytest.raises(ShapeError):
        patchify_heatmap(np.zeros((15, 16, 8)), 8)


def test_forward_shape_and_range():
    model = build_model(ModelConfig(), seed=1)
    r, h, q = inputs(model.config, 2, dtype=torch.float32)
    out = model(r, h, q)
    assert out.shape == (1, 64, 64, 8)
    assert torch.all((out > 0) & (out < 1))


def test_forward_reference_count_checked():
    model = build_model(TINY, dtype=torch.float64)
    with pytest.raises(ConfigError):
        model(*inputs(TINY, 4))


def test_reference_permutation_invariance():
    model = build_model(TINY, seed=3, dtype=torch.float64)
    r, h, q = inputs(TINY, 3)
    perm = [2, 0, 1]
    a = model(r, h, q)
    b = model(r[:, perm], h[:, perm], q)
    assert (a - b).abs().max() < 1e-5


def test_padding_mask_matches_unpadded():
    model = build_model(TINY, seed=4, dtype=torch.float64)
    r, h, q = inputs(TINY, 2)
    ref = model(r, h, q)
    rp = torch.cat([r, torch.zeros_like(r[:, :1])], 1)
    hp = torch.cat([h, torch.zeros_like(h[:, :1])], 1)
    valid = torch.tensor([[True, True, False]])
    torch.testing.assert_close(model(rp, hp, q, valid), ref)


def test_build_model_deterministic_and_rng_restored():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = build_model(TINY, seed=7)
    after = torch.rand(1)
    b = build_model(TINY, seed=7)
    assert torch.equal(before, after)
    for (na, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb), na
    assert torch.all(a.head.bias == HEAD_BIAS_INIT)


def test_patch_embed_zero_image_zero_bias():
    model = build_model(TINY, dtype=torch.float64)
    with torch.no_grad():
        model.patch_proj.bias.zero_()
    tokens = model.patch_proj(torch.zeros(2, 8 * 8 * 3, dtype=torch.float64))
    assert torch.all(tokens == 0)
    assert patch_embed(np.zeros((16, 16, 3)), model).shape == (2, 2, 8)
    with pytest.raises(ShapeError):
        patch_embed(np.zeros((24, 16, 3)), model)


def test_fuse_reference_linear_oracle():
    model = build_model(TINY, seed=2, dtype=torch.float64)
    rng = np.random.default_rng(0)
    feat = rng.normal(size=(2, 2, 8))
    h = rng.random((16, 16, 8))
    W = model.heat_proj.weight.detach().numpy()
    b = model.heat_proj.bias.detach().numpy()
    tok = patchify_heatmap(h, 8)
    expect = feat + (tok @ W.T + b).reshape(2, 2, 8)
    np.testing.assert_allclose(fuse_reference(feat, h, model), expect, atol=1e-12)
    with torch.no_grad():
        model.heat_proj.bias.zero_()
    np.testing.assert_allclose(fuse_reference(feat, np.zeros_like(h), model), feat, atol=0)
    d1 = fuse_reference(feat, h, model) - feat
    d2 = fuse_reference(feat, 2 * h, model) - feat
    np.testing.assert_allclose(d2, 2 * d1, atol=1e-12)
    with pytest.raises(ShapeError):
        fuse_reference(np.zeros((3, 2, 8)), h, model)


def test_predict_deterministic():
    model = build_model(TINY, seed=5)
    rng = np.random.default_rng(0)
    imgs = [rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)]
    hms = [rng.random((16, 16, 8))]
    q = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    np.testing.assert_array_equal(predict(model, imgs, hms, q), predict(model, imgs, hms, q))


def test_soft_argmax_matches_decode():
    from cornerpose.heatmap import decode_corners, encode_heatmap

    rng = np.random.default_rng(1)
    pts = rng.uniform(5, 58, (8, 2))
    pts[0] = [0.2, 63.0]  # window clipped by the border
    h = encode_heatmap(pts, (64, 64), sigma=2.0)
    ref, _ = decode_corners(h)
    got = soft_argmax(torch.from_numpy(h)[None])[0].numpy()
    np.testing.assert_allclose(got, ref.points, atol=1e-10)


def test_gradients_linearity_and_zero_residual():
    model = build_model(TINY, seed=0, dtype=torch.float64)
    r, h, q = inputs(TINY, 1)
    batch = (r, h, q)

    def l1(m, b):
        return m(*b).sum()

    def l2(m, b):
        return (m(*b) ** 2).mean()

    g1, g2 = gradients(l1, batch, model), gradients(l2, batch, model)
    g12 = gradients(lambda m, b: l1(m, b) + l2(m, b), batch, model)
    for k in g1:
        torch.testing.assert_close(g12[k], g1[k] + g2[k])

    target = model(*batch).detach()

    def perfect(m, b):
        return torch.nn.functional.smooth_l1_loss(m(*b), target)

    assert torch.all(gradients(perfect, batch, model)["head.bias"] == 0)
    with pytest.raises(NumericFailure):
        gradients(lambda m, b: l1(m, b) * float("nan"), batch, model)


def test_sincos_table_distinguishes_positions():
    t = sincos_2d(8, 8, 64).numpy()
    assert t.shape == (64, 64)
    sim = t @ t.T
    # every position is most similar to itself
    assert np.all(np.argmax(sim, axis=1) == np.arange(64))
    assert np.all(sincos_2d(2, 3, 10).numpy()[:, 8:] == 0)  # leftover channels


def test_decoder_attention_starts_with_tied_query_key():
    model = build_model(ModelConfig(), seed=0)
    d = model.config.width
    for block in model.blocks:
        w = block.attn.qkv.weight
        assert torch.equal(w[:d], w[d : 2 * d])
        assert not torch.equal(w[:d], w[2 * d :])
    # tied only at the start: the two blocks are separate parameters
    assert model.blocks[0].attn.qkv.weight.requires_grad
