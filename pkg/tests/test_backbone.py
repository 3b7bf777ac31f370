"""Backbone blocks checked against straight-line numpy oracles."""

import numpy as np
import pytest
import torch

import oracles
from parr.backbone import (
    BackboneConfig,
    ChannelAwareAttention,
    CrossTokenFusion,
    CrossTransformerBackbone,
    SwinStage,
    VitBlock,
    WindowedSelfAttention,
    grad_config,
    full_size_config,
    tiny_config,
)
from parr.errors import ConfigError, NumericError


def _params(module) -> dict:
    return {k: v.detach().double().numpy() for k, v in module.state_dict().items()}


# -- configuration -----------------------------------------------------------


def test_full_size_config_derived_shapes():
    cfg = full_size_config()
    assert cfg.swin_grid(0) == (64, 32)  # 64 * 32 == 2048 first-stage tokens
    assert cfg.swin_grid(0)[0] * cfg.swin_grid(0)[1] == 2048
    assert cfg.swin_grid(3) == (8, 4)
    assert cfg.vit_grid() == (18, 9)
    assert cfg.vit_tokens() == 162  # sequence is 163 with the class token
    assert cfg.feature_dim == 1536
    assert cfg.stage_heads == (4, 8, 16, 32)
    assert cfg.n_vit_heads == 32
    assert cfg.n_fusion_heads == 24


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(image_hw=(30, 16)),  # not divisible by swin patch
        dict(image_hw=(0, 16)),
        dict(swin_dims=(32,), swin_depths=(1, 1)),  # length mismatch
        dict(swin_dims=(), swin_depths=()),
        # 2x2 base grid cannot halve twice
        dict(image_hw=(8, 8), vit_patch=8, swin_dims=(8, 16, 32), swin_depths=(1, 1, 1)),
        dict(n_attr=0),
        dict(window=0),
        dict(swin_heads=(3, 3)),  # 32 % 3 != 0
        dict(image_hw=(32, 4), vit_patch=8),  # smaller than the vit patch
    ],
)
def test_config_rejects_inconsistency(kwargs):
    base = dict(
        image_hw=(32, 16),
        n_attr=8,
        swin_patch=4,
        swin_dims=(32, 64),
        swin_depths=(1, 1),
        window=4,
        vit_patch=8,
        vit_dim=64,
        vit_depth=2,
        fusion_dim=64,
    )
    base.update(kwargs)
    with pytest.raises(ConfigError):
        BackboneConfig(**base)


# -- channel-profile attention ------------------------------------------------


def test_channel_attention_matches_oracle(rng):
    mod = ChannelAwareAttention(n_tokens=12).double()
    grid = torch.from_numpy(rng.standard_normal((2, 5, 3, 4)))
    out = mod(grid)
    p = _params(mod)
    for b in range(2):
        want = oracles.casa(grid[b].numpy(), p["w_q"], p["w_k"], p["w_v"])
        np.testing.assert_allclose(out[b].detach().numpy(), want, atol=1e-10, rtol=0)


def test_channel_attention_value_path(rng):
    mod = ChannelAwareAttention(n_tokens=6, use_value_path=True).double()
    grid = torch.from_numpy(rng.standard_normal((1, 4, 2, 3)))
    out = mod(grid)
    p = _params(mod)
    want = oracles.casa(grid[0].numpy(), p["w_q"], p["w_k"], p["w_v"], use_value_path=True)
    np.testing.assert_allclose(out[0].detach().numpy(), want, atol=1e-10, rtol=0)


def test_channel_attention_uniform_when_query_weight_zero(rng):
    mod = ChannelAwareAttention(n_tokens=8).double()
    with torch.no_grad():
        mod.w_q.zero_()
    grid = torch.from_numpy(rng.standard_normal((1, 3, 2, 4)))
    out = mod(grid).detach()
    att = mod.last_attention[0].numpy()
    np.testing.assert_allclose(att, np.full((8, 8), 1 / 8), atol=1e-12, rtol=0)
    # Uniform attention adds the position-mean channel profile everywhere.
    m = grid[0].flatten(1).T.numpy()
    want = m + m.mean(axis=0)
    np.testing.assert_allclose(out[0].flatten(1).T.numpy(), want, atol=1e-12, rtol=0)


def test_channel_attention_single_position_doubles(rng):
    mod = ChannelAwareAttention(n_tokens=1).double()
    grid = torch.from_numpy(rng.standard_normal((1, 7, 1, 1)))
    out = mod(grid).detach()
    np.testing.assert_allclose(out.numpy(), 2 * grid.numpy(), atol=1e-12, rtol=0)


def test_channel_attention_rejects_non_finite():
    mod = ChannelAwareAttention(n_tokens=4)
    grid = torch.zeros(1, 2, 2, 2)
    grid[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        mod(grid)
    grid[0, 0, 0, 0] = float("inf")
    with pytest.raises(NumericError):
        mod(grid)


def test_channel_attention_rejects_wrong_grid():
    mod = ChannelAwareAttention(n_tokens=4)
    with pytest.raises(ConfigError):
        mod(torch.zeros(1, 2, 3, 3))


def test_channel_attention_rows_sum_to_one(rng):
    mod = ChannelAwareAttention(n_tokens=6).double()
    mod(torch.from_numpy(rng.standard_normal((2, 4, 2, 3))))
    sums = mod.last_attention.sum(dim=-1).numpy()
    np.testing.assert_allclose(sums, np.ones_like(sums), atol=1e-12, rtol=0)


# -- windowed attention --------------------------------------------------------


@pytest.mark.parametrize(
    "h,w,window,shifted",
    [
        (4, 4, 2, False),
        (4, 4, 2, True),  # shifted, no padding
        (6, 4, 4, False),  # padding on one axis
        (6, 4, 4, True),  # padding plus shift
        (4, 4, 8, False),  # window larger than grid collapses to global
        (2, 2, 2, True),  # shift degenerates when one window covers the grid
        (5, 3, 4, True),  # both axes padded, window clipped to min side
    ],
)
def test_windowed_attention_matches_dense_oracle(rng, h, w, window, shifted):
    dim, heads = 8, 2
    mod = WindowedSelfAttention(dim, heads, window, shifted).double()
    x = torch.from_numpy(rng.standard_normal((2, h, w, dim)))
    out = mod(x)
    p = _params(mod)
    for b in range(2):
        want = oracles.window_attention_dense(
            x[b].numpy(),
            p["qkv.weight"],
            p["qkv.bias"],
            p["proj.weight"],
            p["proj.bias"],
            heads,
            window,
            shifted,
        )
        np.testing.assert_allclose(out[b].detach().numpy(), want, atol=1e-9, rtol=0)


def test_windowed_attention_rows_sum_to_one(rng):
    mod = WindowedSelfAttention(8, 2, 4, shifted=True).double()
    mod(torch.from_numpy(rng.standard_normal((1, 6, 4, 8))))
    sums = mod.last_attention.sum(dim=-1).numpy()
    np.testing.assert_allclose(sums, np.ones_like(sums), atol=1e-12, rtol=0)


def test_windowed_attention_padding_is_inert(rng):
    # With zero shift and same-window masking only, a 6x4 grid under a 4-window
    # pads rows 4..7; real-token outputs must not depend on what padding holds.
    mod = WindowedSelfAttention(8, 2, 4, shifted=False).double()
    x = torch.from_numpy(rng.standard_normal((1, 6, 4, 8)))
    base = mod(x).detach().numpy()
    again = mod(x * 1.0).detach().numpy()
    np.testing.assert_allclose(base, again, atol=0, rtol=0)
    assert np.all(np.isfinite(base))


# -- stages and blocks ---------------------------------------------------------


def test_swin_stage_matches_oracle(rng):
    mod = SwinStage(dim=8, depth=2, heads=2, window=2, mlp_ratio=4.0, out_dim=16)
    mod = mod.double()
    grid = torch.from_numpy(rng.standard_normal((2, 8, 4, 4)))
    out = mod(grid)
    assert out.shape == (2, 16, 2, 2)
    p = _params(mod)
    for b in range(2):
        want = oracles.swin_stage(grid[b].numpy(), p, depth=2, heads=2, window=2)
        np.testing.assert_allclose(out[b].detach().numpy(), want, atol=1e-9, rtol=0)


def test_swin_stage_without_merge_keeps_grid(rng):
    mod = SwinStage(dim=8, depth=1, heads=1, window=2, mlp_ratio=2.0, out_dim=None)
    mod = mod.double()
    grid = torch.from_numpy(rng.standard_normal((1, 8, 4, 2)))
    out = mod(grid)
    assert out.shape == (1, 8, 4, 2)
    want = oracles.swin_stage(grid[0].numpy(), _params(mod), depth=1, heads=1, window=2)
    np.testing.assert_allclose(out[0].detach().numpy(), want, atol=1e-9, rtol=0)


def test_vit_block_matches_oracle(rng):
    mod = VitBlock(dim=12, heads=3, mlp_ratio=4.0).double()
    x = torch.from_numpy(rng.standard_normal((2, 7, 12)))
    out = mod(x)
    p = _params(mod)
    for b in range(2):
        want = oracles.vit_block(x[b].numpy(), p, heads=3)
        np.testing.assert_allclose(out[b].detach().numpy(), want, atol=1e-9, rtol=0)


# -- cross-branch fusion ---------------------------------------------------------


def test_cross_fusion_matches_oracle(rng):
    mod = CrossTokenFusion(query_dim=12, token_dim=10, fusion_dim=8, heads=2).double()
    q = torch.from_numpy(rng.standard_normal((2, 12)))
    tokens = torch.from_numpy(rng.standard_normal((2, 5, 10)))
    out = mod(q, tokens)
    p = _params(mod)
    for b in range(2):
        want = oracles.cross_fusion(q[b].numpy(), tokens[b].numpy(), p, 2, 8)
        np.testing.assert_allclose(out[b].detach().numpy(), want, atol=1e-10, rtol=0)


def test_cross_fusion_attention_covers_query_and_tokens(rng):
    mod = CrossTokenFusion(query_dim=6, token_dim=6, fusion_dim=8, heads=2).double()
    mod(
        torch.from_numpy(rng.standard_normal((3, 6))),
        torch.from_numpy(rng.standard_normal((3, 5, 6))),
    )
    att = mod.last_attention
    assert att.shape == (3, 2, 1, 6)  # 5 tokens plus the aligned query itself
    sums = att.sum(dim=-1).numpy()
    np.testing.assert_allclose(sums, np.ones_like(sums), atol=1e-12, rtol=0)


def test_cross_fusion_identical_values_ignore_attention(rng):
    # When every sequence element equals the aligned query, the attended
    # context is w_v(za) no matter how attention distributes, so the output
    # is out_proj(za + w_v(za)).
    mod = CrossTokenFusion(query_dim=6, token_dim=6, fusion_dim=8, heads=2).double()
    with torch.no_grad():
        mod.token_align.weight.copy_(mod.query_align.weight)
    q = torch.from_numpy(rng.standard_normal((1, 6)))
    tokens = q.unsqueeze(1).repeat(1, 4, 1)
    out = mod(q, tokens)
    za = mod.query_align(q)
    want = mod.out_proj(za + mod.w_v(za))
    np.testing.assert_allclose(
        out.detach().numpy(), want.detach().numpy(), atol=1e-12, rtol=0
    )


# -- full model -----------------------------------------------------------------


def test_full_forward_matches_oracle(rng):
    torch.manual_seed(7)
    cfg = tiny_config()
    model = CrossTransformerBackbone(cfg).double().eval()
    images = torch.from_numpy(rng.standard_normal((2, 3, 32, 16)))
    out = model(images)
    p = _params(model)
    for b in range(2):
        feature, logits, probs = oracles.full_forward(images[b].numpy(), p, cfg)
        np.testing.assert_allclose(
            out.feature[b].detach().numpy(), feature, atol=1e-8, rtol=0
        )
        np.testing.assert_allclose(
            out.logits[b].detach().numpy(), logits, atol=1e-8, rtol=0
        )
        np.testing.assert_allclose(
            out.probs[b].detach().numpy(), probs, atol=1e-8, rtol=0
        )


def test_forward_output_shapes_and_composition():
    cfg = tiny_config()
    model = CrossTransformerBackbone(cfg)
    out = model(torch.rand(3, 3, 32, 16))
    assert out.m_s.shape == (3, 64)
    assert out.m_v.shape == (3, 64)
    assert out.feature.shape == (3, 128)
    assert out.logits.shape == (3, 8)
    assert out.probs.shape == (3, 8)
    np.testing.assert_allclose(
        out.feature.detach().numpy(),
        torch.cat([out.m_s, out.m_v], dim=-1).detach().numpy(),
    )
    np.testing.assert_allclose(
        out.probs.detach().numpy(),
        torch.sigmoid(out.logits).detach().numpy(),
        atol=1e-7,
    )
    assert ((out.probs > 0) & (out.probs < 1)).all()


def test_encode_matches_forward_and_detaches():
    model = CrossTransformerBackbone(tiny_config()).eval()
    image = torch.rand(1, 3, 32, 16)
    feat = model.encode(image)
    assert not feat.requires_grad
    np.testing.assert_allclose(
        feat.numpy(), model(image).feature.detach().numpy(), atol=1e-6
    )


def test_single_image_is_promoted_to_batch():
    model = CrossTransformerBackbone(tiny_config())
    out = model(torch.rand(3, 32, 16))
    assert out.feature.shape == (1, 128)


def test_wrong_image_shape_raises():
    model = CrossTransformerBackbone(tiny_config())
    with pytest.raises(ConfigError):
        model(torch.rand(1, 3, 16, 16))
    with pytest.raises(ConfigError):
        model(torch.rand(1, 1, 32, 16))


def test_plain_branch_resize_path():
    # A patch size that does not divide the image exercises the internal
    # downscale (32x16 -> 28x14 for patch 7, a 4x2 grid).
    cfg = tiny_config()
    cfg = BackboneConfig(
        image_hw=(32, 16),
        n_attr=8,
        swin_patch=4,
        swin_dims=(32, 64),
        swin_depths=(1, 1),
        window=4,
        vit_patch=7,
        vit_dim=64,
        vit_depth=1,
        fusion_dim=64,
    )
    assert cfg.vit_grid() == (4, 2)
    model = CrossTransformerBackbone(cfg)
    out = model(torch.rand(2, 3, 32, 16))
    assert out.feature.shape == (2, 128)
    assert torch.isfinite(out.feature).all()


def test_construction_is_seed_deterministic():
    torch.manual_seed(123)
    a = CrossTransformerBackbone(grad_config()).state_dict()
    torch.manual_seed(123)
    b = CrossTransformerBackbone(grad_config()).state_dict()
    assert set(a) == set(b)
    for k in a:
        assert torch.equal(a[k], b[k]), k


def test_attention_maps_exposed_after_forward():
    model = CrossTransformerBackbone(tiny_config())
    model(torch.rand(1, 3, 32, 16))
    assert model.casa[0].last_attention is not None
    assert model.casa[0].last_attention.shape == (1, 32, 32)  # 8x4 grid
    assert model.svcf.last_attention is not None
    assert model.svcf.last_attention.shape[-1] == cfg_tokens_plus_query()
    assert model.vscf.last_attention is not None


def cfg_tokens_plus_query() -> int:
    cfg = tiny_config()
    return cfg.vit_tokens() + 1
