"""Loss functions against brute-force and closed-form oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import gaussian_filter

from mirl.decoder import PairOutputs
from mirl.diffcore import DimensionError, Tensor, grad_check
from mirl.objectives import (
    ConvFeatureExtractor,
    assign_coarse_fine,
    coarse_fine_targets,
    default_lambdas,
    gaussian_kernel,
    infonce_feature_loss,
    mix_visible,
    multi_decoder_loss,
    patches_to_image,
    perceptual_loss,
    pixel_loss,
    residual_pair_loss,
    total_loss,
    variant_loss_dagger,
)
from mirl.tokenizer import MaskPlan, patchify, sample_mask, unpatchify


def _brute_pixel(pred, x, plan):
    """Direct double loop: mean over masked patches of per-patch mean squared error."""
    total, count = 0.0, 0
    for b in range(plan.batch):
        for i in plan.masked[b]:
            total += np.sum((pred[b, i] - x[b, i]) ** 2) / x.shape[-1]
            count += 1
    return total / count


def _toy(seed=0, B=2, N=6, K=12, ratio=0.5):
    rng = np.random.default_rng(seed)
    plan = sample_mask(N, ratio, rng, B)
    t = lambda: Tensor(rng.normal(size=(B, N, K)), requires_grad=True)
    return rng, plan, rng.normal(size=(B, N, K)), t


class TestPixelLoss:
    def test_perfect_prediction(self):
        _, plan, x, _ = _toy()
        assert pixel_loss(Tensor(x), x, plan).item() == 0.0

    def test_unit_error_gives_one(self):
        x = np.zeros((1, 3, 48))
        plan = MaskPlan(3, [[0, 2]], [[1]])
        assert pixel_loss(Tensor(x + 1.0), x, plan).item() == 1.0

    def test_brute_force(self):
        _, plan, x, t = _toy(B=1, N=5, K=4, ratio=0.6)
        pred = t()
        assert plan.num_masked == 3
        assert pixel_loss(pred, x, plan).item() == pytest.approx(_brute_pixel(pred.data, x, plan), rel=1e-12)

    def test_errors(self):
        _, plan, x, t = _toy()
        with pytest.raises(DimensionError):
            pixel_loss(t(), x[:, :, :5], plan)
        with pytest.raises(ValueError):
            pixel_loss(t(), x, MaskPlan(6, [list(range(6))] * 2, [[]] * 2))


class TestResidualPair:
    def test_teacher_forced_residual_is_zero(self):
        _, plan, x, t = _toy()
        main = t()
        pair = PairOutputs(1, main, Tensor(x - main.data))
        assert residual_pair_loss(pair, x, plan).item() <= 1e-10

    def test_zero_residual_reduces_to_pixel_loss(self):
        _, plan, x, t = _toy()
        main = t()
        pair = PairOutputs(1, main, Tensor(np.zeros_like(x)))
        assert residual_pair_loss(pair, x, plan).item() == pixel_loss(main, x, plan).item()

    def test_brute_force(self):
        _, plan, x, t = _toy(3)
        pair = PairOutputs(1, t(), t())
        ref = _brute_pixel(pair.main.data + pair.residual.data, x, plan)
        assert residual_pair_loss(pair, x, plan).item() == pytest.approx(ref, rel=1e-12)

    def test_shortcut_gradient_formula(self):
        _, plan, x, t = _toy(4)
        pair = PairOutputs(1, t(), t())
        residual_pair_loss(pair, x, plan).backward()
        K = x.shape[-1]
        expect = -(2.0 / (plan.num_masked * plan.batch * K)) * (x - pair.main.data - pair.residual.data)
        expect *= plan.mask_matrix()[..., None]
        np.testing.assert_allclose(pair.main.grad, expect, atol=1e-12)
        np.testing.assert_allclose(pair.residual.grad, expect, atol=1e-12)

    def test_detached_main_gets_no_gradient(self):
        _, plan, x, t = _toy(5)
        pair = PairOutputs(1, t(), t())
        residual_pair_loss(pair, x, plan, detach_main=True).backward()
        assert pair.main.grad is None or not np.any(pair.main.grad)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6))
    def test_reduction_identity(self, seed):
        _, plan, x, t = _toy(seed, N=8, K=6)
        pair = PairOutputs(1, t(), t())
        combined = Tensor(pair.main.data + pair.residual.data)
        assert residual_pair_loss(pair, x, plan).item() == pixel_loss(combined, x, plan).item()


class TestTotalLoss:
    def test_default_weights(self):
        assert default_lambdas(1) == [1.0]
        assert default_lambdas(4) == [0.5, 0.5]
        assert default_lambdas(6) == pytest.approx([1 / 3] * 3)

    @pytest.mark.parametrize("G", [2, 4, 6])
    def test_weighted_sum(self, G):
        _, plan, x, t = _toy(G)
        pairs = [PairOutputs(g + 1, t(), t()) for g in range(G // 2)]
        rep = total_loss(pairs, x, plan)
        ref = sum((2.0 / G) * residual_pair_loss(p, x, plan).item() for p in pairs)
        assert abs(rep.total.item() - ref) <= 1e-12 * abs(ref)
        assert len(rep.per_pair) == G // 2

    def test_override_and_length_check(self):
        _, plan, x, t = _toy()
        pairs = [PairOutputs(1, t(), t()), PairOutputs(2, t(), t())]
        rep = total_loss(pairs, x, plan, lambdas=[1.0, 0.0])
        assert rep.total.item() == pytest.approx(rep.per_pair[0].item(), rel=1e-15)
        with pytest.raises(ValueError):
            total_loss(pairs, x, plan, lambdas=[1.0])

    def test_values_dict(self):
        _, plan, x, t = _toy()
        vals = total_loss([PairOutputs(1, t(), t())], x, plan).values()
        assert set(vals) == {"loss", "loss_1"} and vals["loss"] == vals["loss_1"]


class TestDagger:
    def test_zero_omega_is_exact(self):
        _, plan, x, t = _toy()
        pair = PairOutputs(1, t(), t())
        assert variant_loss_dagger(pair, x, plan, 0.0).item() == residual_pair_loss(pair, x, plan).item()

    def test_unit_omega_zero_residual_doubles(self):
        _, plan, x, t = _toy()
        pair = PairOutputs(1, t(), Tensor(np.zeros_like(x)))
        assert variant_loss_dagger(pair, x, plan, 1.0).item() == pytest.approx(
            2 * pixel_loss(pair.main, x, plan).item(), rel=1e-14)

    def test_oracle(self):
        _, plan, x, t = _toy(7)
        pair = PairOutputs(1, t(), t())
        ref = 0.1 * _brute_pixel(pair.main.data, x, plan) + _brute_pixel(pair.main.data + pair.residual.data, x, plan)
        assert variant_loss_dagger(pair, x, plan, 0.1).item() == pytest.approx(ref, rel=1e-12)

    def test_negative_omega(self):
        _, plan, x, t = _toy()
        with pytest.raises(ValueError):
            variant_loss_dagger(PairOutputs(1, t(), t()), x, plan, -0.1)


class TestMultiDecoder:
    def test_equal_weights_and_branch_values(self):
        _, plan, x, t = _toy()
        preds = [t(), t(), t(), t()]
        rep = multi_decoder_loss(preds, [x] * 4, plan)
        assert rep.lambdas == [0.25] * 4
        for p, v in zip(preds, rep.per_pair):
            assert v.item() == pytest.approx(_brute_pixel(p.data, x, plan), rel=1e-12)

    def test_target_count(self):
        _, plan, x, t = _toy()
        with pytest.raises(ValueError):
            multi_decoder_loss([t(), t()], [x], plan)


class TestCoarseFine:
    def test_kernel_normalised(self):
        for sigma in (0.5, 1.0, 2.0, 3.7):
            k = gaussian_kernel(sigma)
            assert abs(k.sum() - 1.0) <= 1e-9
            r = len(k) // 2
            raw = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
            np.testing.assert_allclose(k, raw / raw.sum(), atol=1e-15)

    def test_split_is_exact_on_eight_bit_images(self):
        x = (np.random.default_rng(0).integers(0, 256, (2, 3, 16, 16)) / 255).astype(np.float32)
        cf = coarse_fine_targets(x, 2.0)
        np.testing.assert_array_equal(cf.coarse + cf.fine, x)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.3, 6.0), st.sampled_from([1.0, 1e-3, 255.0, -2.0]))
    def test_split_is_exact_on_float32_data(self, seed, sigma, gain):
        x = (np.random.default_rng(seed).random((1, 3, 12, 12)) * gain).astype(np.float32)
        cf = coarse_fine_targets(x, sigma)
        np.testing.assert_array_equal(cf.coarse + cf.fine, x)

    def test_blur_matches_scipy(self):
        x = np.random.default_rng(1).random((1, 2, 20, 20))
        ref = gaussian_filter(x, sigma=(0, 0, 1.5, 1.5), mode="mirror", truncate=3.0)
        # scipy truncates at int(3*sigma + 0.5) = 5 taps, ours at ceil(3*sigma) = 5
        # the coarse part is snapped to a 2**-30 grid
        np.testing.assert_allclose(coarse_fine_targets(x, 1.5).coarse, ref, atol=2.0 ** -31)

    def test_constant_image_has_no_fine_part(self):
        x = np.full((1, 3, 16, 16), 0.4)
        np.testing.assert_allclose(coarse_fine_targets(x, 50.0).fine, 0.0, atol=2.0 ** -31)

    def test_assignment_orders(self):
        x = np.random.default_rng(2).random((1, 3, 8, 8))
        cf = coarse_fine_targets(x, 1.0)
        c2f = assign_coarse_fine(cf, 4, "coarse_to_fine")
        f2c = assign_coarse_fine(cf, 4, "fine_to_coarse", P=4)
        assert c2f[0] is cf.coarse and c2f[3] is cf.fine
        np.testing.assert_array_equal(f2c[0], patchify(cf.fine, 4))
        np.testing.assert_array_equal(f2c[2], patchify(cf.coarse, 4))
        with pytest.raises(ValueError):
            assign_coarse_fine(cf, 3)
        with pytest.raises(ValueError):
            assign_coarse_fine(cf, 2, "sideways")


class TestInfoNCE:
    def test_orthogonal_pair_closed_form(self):
        z = np.eye(2)
        loss = infonce_feature_loss(Tensor(z), z, tau=1.0).item()
        assert loss == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
        assert loss == pytest.approx(0.3133, abs=1e-4)

    def test_uniform_similarity_gives_log_b(self):
        z = np.ones((5, 3))
        assert infonce_feature_loss(Tensor(z), z, tau=0.2).item() == pytest.approx(math.log(5), abs=1e-12)

    def test_scale_invariant_inputs(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        l1 = infonce_feature_loss(Tensor(a), b).item()
        l2 = infonce_feature_loss(Tensor(3 * a), 0.5 * b).item()
        assert l1 == pytest.approx(l2, rel=1e-10) and l1 >= 0

    def test_gradient(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        pos = rng.normal(size=(3, 4))
        rep = grad_check(lambda: infonce_feature_loss(a, pos, 0.5), {"a": a})
        assert rep.ok, rep.errors

    def test_errors(self):
        with pytest.raises(ValueError):
            infonce_feature_loss(Tensor(np.ones((1, 3))), np.ones((1, 3)))
        with pytest.raises(ValueError):
            infonce_feature_loss(Tensor(np.ones((2, 3))), np.ones((2, 3)), tau=0.0)


class TestPerceptual:
    def test_identical_is_zero(self):
        x = np.random.default_rng(0).random((2, 3, 8, 8))
        ext = ConvFeatureExtractor.seeded(3, (4, 4))
        assert perceptual_loss(Tensor(x), x, ext).item() == 0.0

    def test_identity_extractor_is_masked_mse(self):
        rng = np.random.default_rng(1)
        x = rng.random((1, 1, 8, 8))
        plan = sample_mask(4, 0.5, rng, 1)
        pred = Tensor(rng.random((1, 4, 16)))
        mixed = patches_to_image(mix_visible(pred, patchify(x, 4), plan), 4, 8, 8)
        ident = np.zeros((1, 1, 3, 3))
        ident[0, 0, 1, 1] = 1.0
        # relu would clip; inputs are non-negative so the identity survives it
        ext = ConvFeatureExtractor([(ident, np.zeros(1), 1)])
        diff = (mixed.data - x) ** 2
        assert perceptual_loss(mixed, x, ext).item() == pytest.approx(diff.mean(), rel=1e-12)
        vis = unpatchify(np.broadcast_to((1 - plan.mask_matrix())[..., None], (1, 4, 16)), 4, 8, 8)
        assert np.all(diff[vis > 0] == 0)

    def test_two_layer_oracle(self):
        rng = np.random.default_rng(2)
        ext = ConvFeatureExtractor.seeded(3, (4, 6), seed=3)
        x, y = rng.random((2, 3, 8, 8)), rng.random((2, 3, 8, 8))

        def feats(img):
            out = []
            for w, b, s in ext.layers:
                k = w.shape[-1]
                p = np.pad(img, ((0, 0), (0, 0), (1, 1), (1, 1)))
                H = (p.shape[2] - k) // s + 1
                o = np.zeros((img.shape[0], w.shape[0], H, H))
                for i in range(H):
                    for j in range(H):
                        o[:, :, i, j] = np.einsum("bchw,ochw->bo", p[:, :, i * s:i * s + k, j * s:j * s + k], w) + b
                img = np.maximum(o, 0)
                out.append(img)
            return out

        ref = sum(np.mean((a - b) ** 2) for a, b in zip(feats(y), feats(x)))
        assert perceptual_loss(Tensor(y), x, ext).item() == pytest.approx(ref, abs=1e-10)

    def test_layer_subset_and_empty(self):
        x = np.random.default_rng(3).random((1, 3, 8, 8))
        y = Tensor(x + 0.1)
        ext = ConvFeatureExtractor.seeded(3, (4, 4))
        both = perceptual_loss(y, x, ext).item()
        parts = perceptual_loss(y, x, ext, [0]).item() + perceptual_loss(y, x, ext, [1]).item()
        assert both == pytest.approx(parts, rel=1e-12)
        with pytest.raises(ValueError):
            perceptual_loss(y, x, ext, [])

    def test_extractor_roundtrip(self, tmp_path):
        from mirl.training import write_tensor_file

        ext = ConvFeatureExtractor.seeded(3, (4, 5), seed=1)
        tensors, meta = ext.to_tensors()
        write_tensor_file(tmp_path / "f.mirl", tensors, meta)
        back = ConvFeatureExtractor.from_file(tmp_path / "f.mirl")
        for (w1, b1, s1), (w2, b2, s2) in zip(ext.layers, back.layers):
            np.testing.assert_array_equal(w1, w2)
            assert s1 == s2

    def test_patches_to_image_inverts_patchify(self):
        x = np.random.default_rng(4).random((2, 3, 8, 12))
        np.testing.assert_array_equal(patches_to_image(Tensor(patchify(x, 4)), 4, 8, 12).data, x)
