"""Autodiff engine: primitive gradients against central differences, plus closed-form values."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from mirl import diffcore as dc

TOL = 1e-5


def _t(rng, *shape, low=None, high=None):
    data = rng.normal(size=shape) if low is None else rng.uniform(low, high, size=shape)
    return dc.Tensor(data, requires_grad=True)


def _check(fn, **params):
    rep = dc.grad_check(fn, params, h=1e-4, tol=TOL)
    assert rep.ok, rep.errors
    return rep


class TestElementwise:
    def setup_method(self):
        self.rng = np.random.default_rng(0)

    def test_add_sub_mul_broadcast(self):
        a, b = _t(self.rng, 3, 4), _t(self.rng, 4)
        _check(lambda: ((a + b) * (a - b) * 0.5).sum(), a=a, b=b)

    def test_division(self):
        a, b = _t(self.rng, 3, 4), _t(self.rng, 3, 4, low=0.5, high=2.0)
        _check(lambda: (a / b).sum(), a=a, b=b)

    def test_square_sqrt_exp_log(self):
        a = _t(self.rng, 5, low=0.5, high=2.0)
        _check(lambda: (dc.sqrt(a) + dc.exp(a) + dc.log(a) + dc.square(a)).sum(), a=a)

    def test_relu_away_from_kink(self):
        a = dc.Tensor(np.array([-1.5, -0.2, 0.3, 2.0]), requires_grad=True)
        _check(lambda: (dc.relu(a) * a).sum(), a=a)

    def test_gelu_gradient(self):
        a = _t(self.rng, 4, 6)
        _check(lambda: (dc.gelu(a) ** 2).sum(), a=a)

    def test_gelu_matches_erf_form(self):
        x = np.linspace(-4, 4, 81)
        expected = 0.5 * x * (1 + erf(x / math.sqrt(2)))
        np.testing.assert_allclose(dc.gelu(dc.Tensor(x)).data, expected, rtol=0, atol=1e-15)

    def test_gelu_known_value(self):
        # GELU(1) = Phi(1) = 0.8413447460685429...
        assert dc.gelu(dc.Tensor(np.array(1.0))).item() == pytest.approx(0.8413447460685429, abs=1e-15)


class TestReductionsAndShapes:
    def setup_method(self):
        self.rng = np.random.default_rng(1)

    def test_sum_mean_axes(self):
        a = _t(self.rng, 2, 3, 4)
        w = self.rng.normal(size=(2, 4))
        _check(lambda: (dc.mean_over(a, axis=1) * w).sum() + dc.sum_over(a, axis=(0, 2)).sum() ** 2, a=a)

    def test_reshape_transpose(self):
        a = _t(self.rng, 2, 3, 4)
        w = self.rng.normal(size=(4, 2, 3))
        _check(lambda: (a.transpose(2, 0, 1) * w).reshape(-1).sum() ** 2, a=a)

    def test_concat_and_getitem(self):
        a, b = _t(self.rng, 2, 3), _t(self.rng, 2, 5)
        w = self.rng.normal(size=(2, 8))
        _check(lambda: (dc.concat([a, b], axis=1) * w)[:, 1:6].sum() ** 2, a=a, b=b)

    def test_fancy_index_accumulates_repeats(self):
        a = dc.Tensor(np.arange(4.0), requires_grad=True)
        a[np.array([0, 0, 2])].sum().backward()
        np.testing.assert_array_equal(a.grad, [2.0, 0.0, 1.0, 0.0])

    def test_gather_rows(self):
        a = _t(self.rng, 2, 5, 3)
        idx = np.array([[4, 0, 0], [1, 2, 3]])
        w = self.rng.normal(size=(2, 3, 3))
        _check(lambda: (dc.gather_rows(a, idx) * w).sum() ** 2, a=a)

    def test_broadcast_to(self):
        a = _t(self.rng, 3)
        w = self.rng.normal(size=(2, 4, 3))
        _check(lambda: (dc.broadcast_to(a, (2, 4, 3)) * w).sum() ** 2, a=a)


class TestLinearAlgebra:
    def setup_method(self):
        self.rng = np.random.default_rng(2)

    def test_batched_matmul_shared_weight(self):
        x, w = _t(self.rng, 2, 3, 4), _t(self.rng, 4, 5)
        _check(lambda: (dc.matmul(x, w) ** 2).sum(), x=x, w=w)

    def test_batched_matmul_both_batched(self):
        a, b = _t(self.rng, 2, 3, 4), _t(self.rng, 2, 4, 2)
        _check(lambda: (dc.matmul(a, b) ** 2).sum(), a=a, b=b)

    def test_linear(self):
        x, w, b = _t(self.rng, 3, 4), _t(self.rng, 4, 2), _t(self.rng, 2)
        _check(lambda: (dc.linear(x, w, b) ** 2).sum(), x=x, w=w, b=b)


class TestNormalisationAndProbabilities:
    def setup_method(self):
        self.rng = np.random.default_rng(3)

    def test_softmax(self):
        a = _t(self.rng, 3, 5)
        w = self.rng.normal(size=(3, 5))
        _check(lambda: (dc.softmax(a) * w).sum(), a=a)

    def test_log_softmax(self):
        a = _t(self.rng, 3, 5)
        w = self.rng.normal(size=(3, 5))
        _check(lambda: (dc.log_softmax(a) * w).sum(), a=a)

    def test_layer_norm(self):
        x, g, b = _t(self.rng, 2, 3, 6), _t(self.rng, 6), _t(self.rng, 6)
        w = self.rng.normal(size=(2, 3, 6))
        _check(lambda: (dc.layer_norm(x, g, b, 1e-6) * w).sum(), x=x, g=g, b=b)

    def test_layer_norm_statistics(self):
        x = dc.Tensor(self.rng.normal(3.0, 2.0, size=(4, 16)))
        y = dc.layer_norm(x, eps=1e-300).data
        np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-12)

    def test_l2_normalize(self):
        a = _t(self.rng, 3, 4)
        w = self.rng.normal(size=(3, 4))
        _check(lambda: (dc.l2_normalize(a) * w).sum(), a=a)

    def test_cross_entropy_with_smoothing(self):
        a = _t(self.rng, 4, 5)
        _check(lambda: dc.cross_entropy(a, np.array([0, 4, 2, 2]), 0.1), a=a)

    def test_cross_entropy_uniform_is_log_k(self):
        logits = dc.Tensor(np.zeros((3, 7)))
        assert dc.cross_entropy(logits, np.array([0, 3, 6])).item() == pytest.approx(math.log(7), abs=1e-15)

    def test_conv2d(self):
        x, w, b = _t(self.rng, 2, 3, 6, 6), _t(self.rng, 4, 3, 3, 3), _t(self.rng, 4)
        _check(lambda: (dc.conv2d(x, w, b, stride=2, padding=1) ** 2).sum(), x=x, w=w, b=b)

    def test_conv2d_matches_direct_loop(self):
        x = self.rng.normal(size=(1, 2, 5, 5))
        w = self.rng.normal(size=(3, 2, 3, 3))
        out = dc.conv2d(dc.Tensor(x), dc.Tensor(w), padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((1, 3, 5, 5))
        for o in range(3):
            for i in range(5):
                for j in range(5):
                    ref[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[o])
        np.testing.assert_allclose(out, ref, atol=1e-12)


class TestGraphMechanics:
    def test_leaf_gradients_accumulate_across_backward_calls(self):
        a = dc.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (a * 3.0).sum().backward()
        (a * 3.0).sum().backward()
        np.testing.assert_array_equal(a.grad, [6.0, 6.0])

    def test_shared_subexpression(self):
        a = dc.Tensor(np.array(3.0), requires_grad=True)
        b = a * a
        (b + b).backward()
        assert a.grad == pytest.approx(12.0)

    def test_detach_blocks_gradient(self):
        a = dc.Tensor(np.array(2.0), requires_grad=True)
        (a.detach() * a).backward()
        assert a.grad == pytest.approx(2.0)

    def test_no_graph_without_requires_grad(self):
        y = dc.Tensor(np.ones(3)) * 2.0
        assert y._parents == () or not y.requires_grad

    def test_deep_chain_does_not_recurse(self):
        a = dc.Tensor(np.array(1.0), requires_grad=True)
        y = a
        for _ in range(5000):
            y = y * 1.0
        y.backward()
        assert a.grad == 1.0

    def test_backward_needs_scalar_or_grad(self):
        with pytest.raises(Exception):
            dc.Tensor(np.ones(3), requires_grad=True).backward()

    def test_shape_mismatch_raises_dimension_error(self):
        with pytest.raises(dc.DimensionError):
            dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((4, 2))))


class TestGradCheck:
    def test_rejects_float32(self):
        p = dc.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(TypeError):
            dc.grad_check(lambda: p.sum(), {"p": p})

    def test_detects_wrong_gradient(self):
        a = dc.Tensor(np.array([0.3, -0.7]), requires_grad=True)

        def wrong():
            # forward is a*a, backward claims 3a
            return dc._make(a.data ** 2, [a], lambda g: [3 * a.data * g]).sum()

        rep = dc.grad_check(wrong, {"a": a})
        assert not rep.ok
        with pytest.raises(dc.GradCheckError):
            dc.grad_check(wrong, {"a": a}, raise_on_fail=True)

    def test_numerical_gradient_of_quadratic_is_exact(self):
        a = dc.Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        num = dc.numerical_gradient(lambda: float(np.sum(a.data ** 2)), a)
        np.testing.assert_allclose(num, 2 * a.data, atol=1e-10)

    def test_true_zero_gradient_scores_zero(self):
        # softmax ignores a shift shared by all logits, so the shift's gradient is exactly 0
        x = _t(np.random.default_rng(0), 4)
        b = dc.Tensor(np.array([0.7]), requires_grad=True)
        rep = dc.grad_check(lambda: (dc.softmax(x + dc.broadcast_to(b, (4,))) * x).sum(), {"b": b})
        assert rep.errors["b"] == 0.0

    def test_wrong_zero_gradient_is_caught(self):
        a = dc.Tensor(np.array([0.3, -0.7]), requires_grad=True)
        rep = dc.grad_check(lambda: dc._make(a.data ** 2, [a], lambda g: [0 * g]).sum(), {"a": a})
        assert rep.errors["a"] == pytest.approx(1.0)

    def test_scale_uses_whole_tensor(self):
        # entry 0 has a tiny gradient; sampling only it must not inflate the error
        a = dc.Tensor(np.array([1e-6, 3.0]), requires_grad=True)
        rep = dc.grad_check(lambda: (a ** 3).sum(), {"a": a}, max_entries=1, seed=0)
        assert rep.ok

    def test_jitter_is_seeded_and_moves_every_tensor(self):
        p = {"w": dc.Parameter("w", np.zeros((3, 3))), "b": dc.Parameter("b", np.zeros(3))}
        q = {k: dc.Parameter(k, v.data.copy()) for k, v in p.items()}
        dc.jitter_params(p, np.random.default_rng(2))
        dc.jitter_params(q, np.random.default_rng(2))
        for k in p:
            assert np.all(p[k].data != 0) and np.array_equal(p[k].data, q[k].data)

    def test_entry_sampling_is_seeded(self):
        a = dc.Tensor(np.random.default_rng(0).normal(size=50), requires_grad=True)
        r1 = dc.grad_check(lambda: (a ** 3).sum(), {"a": a}, max_entries=5, seed=4)
        r2 = dc.grad_check(lambda: (a ** 3).sum(), {"a": a}, max_entries=5, seed=4)
        assert r1.errors == r2.errors and r1.checked == {"a": 5}


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 10_000))
def test_matmul_gradient_is_outer_product_sum(m, n, seed):
    """d/dW sum(x @ W) = x^T @ ones."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(m, 3))
    w = dc.Tensor(rng.normal(size=(3, n)), requires_grad=True)
    dc.matmul(dc.Tensor(x), w).sum().backward()
    np.testing.assert_allclose(w.grad, x.T @ np.ones((m, n)), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(values):
    p = dc.softmax(dc.Tensor(np.array(values))).data
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0)
