"""Patching, masking and token embedding."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mirl.diffcore import DimensionError, Tensor
from mirl.tokenizer import (
    ImageBatch,
    MaskPlan,
    TokenSequence,
    augment,
    embed_visible,
    full_plan,
    load_image_directory,
    num_masked,
    patchify,
    random_resized_crop,
    sample_mask,
    sincos_pos_embed,
    synthetic_textures,
    unpatchify,
)


class TestPatchify:
    def test_row_major_order_and_pqc_flattening(self):
        x = np.arange(2 * 4 * 4, dtype=float).reshape(1, 2, 4, 4)
        p = patchify(x, 2)
        assert p.shape == (1, 4, 8)
        # patch 1 is the top-right 2x2 block; entries run (p, q, c)
        expected = [x[0, c, i, 2 + j] for i in range(2) for j in range(2) for c in range(2)]
        np.testing.assert_array_equal(p[0, 1], expected)

    def test_roundtrip_is_exact(self):
        x = np.random.default_rng(0).random((3, 3, 8, 12))
        np.testing.assert_array_equal(unpatchify(patchify(x, 4), 4, 8, 12), x)

    def test_rejects_indivisible_size(self):
        with pytest.raises(DimensionError):
            patchify(np.zeros((1, 3, 10, 10)), 4)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(1, 3))
    def test_roundtrip_property(self, b, c, p, k):
        x = np.random.default_rng(b * 100 + c).random((b, c, p * k, p * (k + 1)))
        np.testing.assert_array_equal(unpatchify(patchify(x, p), p, p * k, p * (k + 1)), x)


class TestMasks:
    def test_count_uses_round_half_up(self):
        assert num_masked(196, 0.75) == 147
        assert num_masked(64, 0.75) == 48
        assert num_masked(10, 0.25) == 3  # 2.5 rounds up

    def test_partition_and_sorted(self):
        plan = sample_mask(49, 0.75, np.random.default_rng(0), batch=5)
        plan.validate()
        assert plan.num_masked == 37 and plan.num_visible == 12
        assert np.all(np.diff(plan.visible, axis=1) > 0)
        assert np.all(np.diff(plan.masked, axis=1) > 0)

    def test_masks_differ_across_batch(self):
        plan = sample_mask(64, 0.75, np.random.default_rng(1), batch=4)
        assert len({tuple(r) for r in plan.masked}) == 4

    def test_ids_restore_inverts_storage_order(self):
        plan = sample_mask(16, 0.5, np.random.default_rng(2), batch=3)
        stored = np.concatenate([plan.visible, plan.masked], axis=1)
        restored = np.take_along_axis(stored, plan.ids_restore, axis=1)
        np.testing.assert_array_equal(restored, np.tile(np.arange(16), (3, 1)))

    def test_mask_matrix(self):
        plan = MaskPlan(4, [[0, 2]], [[1, 3]])
        np.testing.assert_array_equal(plan.mask_matrix(), [[0, 1, 0, 1]])

    def test_invalid_plan(self):
        with pytest.raises(ValueError):
            MaskPlan(4, [[0, 1]], [[1, 3]]).validate()

    def test_ratio_bounds(self):
        with pytest.raises(ValueError):
            sample_mask(10, 1.0, np.random.default_rng(0))

    def test_zero_ratio_and_full_plan(self):
        plan = sample_mask(9, 0.0, np.random.default_rng(0))
        assert plan.num_masked == 0
        assert full_plan(9, 2).num_visible == 9

    def test_seeded(self):
        a = sample_mask(64, 0.75, np.random.default_rng(7), 3)
        b = sample_mask(64, 0.75, np.random.default_rng(7), 3)
        np.testing.assert_array_equal(a.masked, b.masked)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 200), st.floats(0.0, 0.99), st.integers(0, 1000))
    def test_count_always_exact(self, n, r, seed):
        plan = sample_mask(n, r, np.random.default_rng(seed), batch=2)
        assert plan.num_masked == num_masked(n, r)
        plan.validate()


class TestEmbedding:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.N, self.K, self.D = 6, 4, 3
        self.patches = rng.normal(size=(2, self.N, self.K))
        self.W = Tensor(rng.normal(size=(self.K, self.D)))
        self.b = Tensor(rng.normal(size=self.D))
        self.pos = Tensor(rng.normal(size=(self.N + 1, self.D)))
        self.cls = Tensor(rng.normal(size=self.D))

    def test_matches_direct_computation(self):
        plan = MaskPlan(self.N, [[0, 3], [2, 5]], [[1, 2, 4, 5], [0, 1, 3, 4]])
        seq = embed_visible(self.patches, plan, self.W, self.b, self.pos, self.cls)
        assert seq.tokens.shape == (2, 3, self.D)
        for bi in range(2):
            np.testing.assert_allclose(seq.tokens.data[bi, 0], self.cls.data + self.pos.data[0])
            for j, idx in enumerate(plan.visible[bi]):
                ref = self.patches[bi, idx] @ self.W.data + self.b.data + self.pos.data[idx + 1]
                np.testing.assert_allclose(seq.tokens.data[bi, j + 1], ref, atol=1e-14)

    def test_token_count_invariant(self):
        plan = full_plan(self.N, 2)
        with pytest.raises(DimensionError):
            TokenSequence(Tensor(np.zeros((2, 3, self.D))), plan)


class TestSincos:
    def test_shape_and_cls_row(self):
        e = sincos_pos_embed(8, 4)
        assert e.shape == (17, 8)
        np.testing.assert_array_equal(e[0], 0.0)

    def test_values_bounded_and_distinct(self):
        e = sincos_pos_embed(16, 4, cls_token=False)
        assert np.abs(e).max() <= 1.0
        assert len({tuple(np.round(r, 12)) for r in e}) == 16

    def test_requires_multiple_of_four(self):
        with pytest.raises(ValueError):
            sincos_pos_embed(6, 2)


class TestData:
    def test_synthetic_shapes_range_and_labels(self):
        d = synthetic_textures(40, size=32, num_classes=10, seed=0)
        assert d.values.shape == (40, 3, 32, 32)
        assert d.values.min() >= 0.0 and d.values.max() <= 1.0
        assert d.labels.min() >= 0 and d.labels.max() < 10

    def test_synthetic_pixels_are_eight_bit(self):
        v = synthetic_textures(8, size=16, seed=1).values
        assert v.dtype == np.float32
        levels = v.astype(np.float64) * 255
        np.testing.assert_allclose(levels, np.round(levels), atol=1e-4)

    def test_synthetic_mean_colour_is_uninformative(self):
        d = synthetic_textures(2000, size=16, seed=2)
        means = d.values.mean(axis=(2, 3))
        per_class = np.array([means[d.labels == k].mean(axis=0) for k in range(10)])
        assert np.ptp(per_class, axis=0).max() < 0.03

    def test_synthetic_is_seeded(self):
        a, b = synthetic_textures(5, seed=3), synthetic_textures(5, seed=3)
        np.testing.assert_array_equal(a.values, b.values)
        assert not np.array_equal(a.values, synthetic_textures(5, seed=4).values)

    def test_image_batch_shape_check(self):
        with pytest.raises(DimensionError):
            ImageBatch(np.zeros((3, 32, 32)))

    def test_load_image_directory(self, tmp_path):
        from PIL import Image

        for cls, colour in (("a", (255, 0, 0)), ("b", (0, 0, 255))):
            (tmp_path / cls).mkdir()
            for i in range(2):
                Image.new("RGB", (20, 20), colour).save(tmp_path / cls / f"{i}.png")
        d = load_image_directory(tmp_path, 8)
        assert d.values.shape == (4, 3, 8, 8)
        np.testing.assert_array_equal(np.sort(d.labels), [0, 0, 1, 1])
        red = d.values[d.labels == 0]
        np.testing.assert_allclose(red[:, 0], 1.0)
        np.testing.assert_allclose(red[:, 2], 0.0)


class TestAugment:
    def test_full_crop_is_identity(self):
        img = np.random.default_rng(0).random((3, 8, 8))
        out = random_resized_crop(img, np.random.default_rng(0), scale=(1.0, 1.0), ratio=(1.0, 1.0))
        np.testing.assert_allclose(out, img, atol=1e-12)

    def test_preserves_shape_and_range(self):
        imgs = np.random.default_rng(1).random((4, 3, 16, 16))
        out = augment(imgs, np.random.default_rng(2))
        assert out.shape == imgs.shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_constant_image_stays_constant(self):
        imgs = np.full((2, 3, 8, 8), 0.3)
        np.testing.assert_allclose(augment(imgs, np.random.default_rng(0)), 0.3)
