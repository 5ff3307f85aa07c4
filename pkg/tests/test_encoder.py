"""Segmented ViT encoder."""

import numpy as np
import pytest
from scipy.special import softmax as sp_softmax

from mirl.diffcore import Tensor, grad_check
from mirl.encoder import (
    ConfigError,
    ViTConfig,
    block_index,
    encode,
    encode_segments,
    expand,
    init_encoder_params,
    multi_head_attention,
    preset,
    reinit_tail,
    run_blocks,
    tokenize,
    transformer_block,
    trunc_normal,
    truncate,
)
from mirl.tokenizer import patchify, sample_mask

SMALL = ViTConfig(depth=4, hidden=16, mlp_dim=32, heads=2, segments=2, patch=4, image_size=16)


def _setup(cfg=SMALL, seed=0, B=2):
    rng = np.random.default_rng(seed)
    params = init_encoder_params(cfg, rng)
    x = rng.random((B, cfg.channels, cfg.image_size, cfg.image_size))
    plan = sample_mask(cfg.num_patches, 0.75, rng, B)
    return params, tokenize(Tensor(patchify(x, cfg.patch)), plan, params)


class TestConfig:
    def test_segment_blocks(self):
        cfg = ViTConfig(depth=12, segments=4)
        assert [list(cfg.segment_blocks(g)) for g in (1, 4)] == [[0, 1, 2], [9, 10, 11]]

    def test_rejects_odd_segments(self):
        with pytest.raises(ConfigError, match="G-g\\+1"):
            ViTConfig(depth=9, segments=3)

    def test_rejects_non_divisor(self):
        with pytest.raises(ConfigError, match="divide"):
            ViTConfig(depth=8, segments=6)

    def test_single_segment_allowed(self):
        assert ViTConfig(depth=7, segments=1).blocks_per_segment == 7

    def test_presets(self):
        assert preset("vit-b-48").depth == 48 and preset("vit-b-48").segments == 6
        assert preset("vit-s-54").hidden == 384
        tiny = preset("tiny-8")
        assert (tiny.depth, tiny.hidden, tiny.segments) == (8, 64, 2)
        with pytest.raises(ConfigError):
            preset("vit-z")


class TestInit:
    def test_truncated_normal_bounds(self):
        w = trunc_normal(np.random.default_rng(0), (20000,), std=0.02)
        assert np.abs(w).max() <= 0.04
        # std of N(0,1) truncated at +-2 is 0.8796
        assert w.std() == pytest.approx(0.02 * 0.8796, rel=0.03)

    def test_parameter_names(self):
        params = init_encoder_params(SMALL, np.random.default_rng(0))
        assert "encoder.blocks.3.mlp.fc2.weight" in params
        assert params["encoder.pos_embed"].shape == (17, 16)
        assert params["encoder.patch_embed.weight"].shape == (48, 16)

    def test_seeded(self):
        a = init_encoder_params(SMALL, np.random.default_rng(3))
        b = init_encoder_params(SMALL, np.random.default_rng(3))
        assert all(np.array_equal(a[n].data, b[n].data) for n in a)


class TestAttention:
    def test_matches_numpy_reference(self):
        rng = np.random.default_rng(1)
        B, T, D, H = 2, 5, 8, 2
        x = rng.normal(size=(B, T, D))
        ws = [rng.normal(size=(D, D)) * 0.3 for _ in range(4)]
        bs = [rng.normal(size=D) * 0.1 for _ in range(4)]
        out = multi_head_attention(Tensor(x), Tensor(x), *[Tensor(a) for pair in zip(ws, bs) for a in pair],
                                   heads=H).data
        q, k, v = (x @ ws[i] + bs[i] for i in range(3))
        hd = D // H
        heads = []
        for h in range(H):
            s = slice(h * hd, (h + 1) * hd)
            a = sp_softmax(q[..., s] @ k[..., s].transpose(0, 2, 1) / np.sqrt(hd), axis=-1)
            heads.append(a @ v[..., s])
        ref = np.concatenate(heads, axis=-1) @ ws[3] + bs[3]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_block_gradient(self):
        params, z0 = _setup()
        sub = {n: p for n, p in params.items() if n.startswith("encoder.blocks.0.")}
        for p in sub.values():
            p.requires_grad = True
        x = z0.tokens.detach()
        rep = grad_check(lambda: (transformer_block(x, params, "encoder.blocks.0", 2) ** 2).sum(), sub,
                         max_entries=4)
        assert rep.ok, rep.errors


class TestSegments:
    def test_composition_equals_monolithic_bit_exactly(self):
        params, z0 = _setup()
        state = encode_segments(z0, SMALL, params)
        mono = run_blocks(z0.tokens, params, SMALL, range(SMALL.depth))
        np.testing.assert_array_equal(state.per_segment[-1].tokens.data, mono.data)

    def test_segment_outputs_are_prefixes(self):
        params, z0 = _setup()
        state = encode_segments(z0, SMALL, params)
        first = run_blocks(z0.tokens, params, SMALL, range(2))
        np.testing.assert_array_equal(state.per_segment[0].tokens.data, first.data)
        assert [s.depth_tag for s in state.per_segment] == [1, 2]

    def test_prior_order(self):
        params, z0 = _setup(ViTConfig(depth=4, hidden=16, mlp_dim=32, heads=2, segments=4, patch=4, image_size=16))
        state = encode_segments(z0, ViTConfig(depth=4, hidden=16, mlp_dim=32, heads=2, segments=4, patch=4,
                                              image_size=16), params)
        assert [s.depth_tag for s in state.prior(3)] == [2, 1, 0]
        assert [s.depth_tag for s in state.prior(1)] == [0]

    def test_visible_only_shapes(self):
        params, z0 = _setup()
        assert encode(z0, SMALL, params).shape == (2, 5, 16)


class TestDepthSurgery:
    def test_block_index(self):
        assert block_index("encoder.blocks.11.attn.qkv.weight") == 11
        assert block_index("encoder.patch_embed.weight") is None

    def test_reinit_tail_touches_only_tail(self):
        params = init_encoder_params(SMALL, np.random.default_rng(0))
        out = reinit_tail(params, SMALL, 1, np.random.default_rng(9))
        for n, p in out.items():
            same = np.array_equal(p.data, params[n].data)
            if block_index(n) == 3 and n.endswith("weight"):
                assert not same, n
            elif block_index(n) != 3:
                assert same, n

    def test_reinit_zero_is_a_copy(self):
        params = init_encoder_params(SMALL, np.random.default_rng(0))
        out = reinit_tail(params, SMALL, 0, np.random.default_rng(9))
        assert all(np.array_equal(out[n].data, params[n].data) and out[n] is not params[n] for n in params)

    def test_reinit_too_many(self):
        params = init_encoder_params(SMALL, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            reinit_tail(params, SMALL, 5, np.random.default_rng(0))

    def test_truncate_and_expand_preserve_prefix(self):
        small = truncate(SMALL, 2)
        assert small.depth == 2 and small.segments == 2
        pre = init_encoder_params(small, np.random.default_rng(1))
        full = expand(pre, SMALL, np.random.default_rng(2))
        assert len(full) == len(init_encoder_params(SMALL, np.random.default_rng(0)))
        for n, p in pre.items():
            np.testing.assert_array_equal(full[n].data, p.data)
        assert "encoder.blocks.3.attn.qkv.weight" in full

    def test_truncate_falls_back_to_one_segment(self):
        assert truncate(ViTConfig(depth=8, segments=4), 6).segments == 1

    def test_keep_equal_depth_is_identity_config(self):
        assert truncate(SMALL, SMALL.depth) == SMALL
