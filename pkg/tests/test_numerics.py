import math

import numpy as np
import numpy.testing as npt
import pytest

from lthead import (DomainError, EvaluationError, ShapeError, dropout_mask,
                    finite_diff_check, gelu, gelu_grad, layer_norm,
                    layer_norm_backward, log_sum_exp, make_rng, matmul,
                    softmax_rows)
from lthead.numerics import gelu_with_grad


def naive_matmul(a, b):
    """Triple-loop oracle: sequential accumulation over the inner index."""
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        npt.assert_array_equal(matmul(np.eye(2), m), m)

    def test_selector_row(self):
        npt.assert_array_equal(matmul(np.array([[1.0, 0.0]]),
                                      np.array([[5.0], [7.0]])),
                               np.array([[5.0]]))

    def test_matches_triple_loop_exactly(self):
        rng = make_rng(0)
        for _ in range(20):
            a = rng.standard_normal((4, 3))
            b = rng.standard_normal((3, 2))
            npt.assert_array_equal(matmul(a, b), naive_matmul(a, b))

    def test_matches_triple_loop_wide_inner(self):
        rng = make_rng(1)
        a = rng.standard_normal((5, 64))
        b = rng.standard_normal((64, 4))
        npt.assert_array_equal(matmul(a, b), naive_matmul(a, b))

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_associativity(self):
        rng = make_rng(2)
        for _ in range(10):
            a = rng.standard_normal((3, 4))
            b = rng.standard_normal((4, 5))
            c = rng.standard_normal((5, 2))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            npt.assert_allclose(left, right, rtol=0, atol=1e-9)


class TestLogSumExp:
    def test_two_zeros(self):
        assert log_sum_exp(np.array([0.0, 0.0])) == pytest.approx(math.log(2), abs=1e-15)

    def test_shift_invariance_huge(self):
        assert log_sum_exp(np.array([1000.0, 1000.0])) == pytest.approx(
            1000.0 + math.log(2), abs=1e-12)

    def test_singleton(self):
        assert log_sum_exp(np.array([3.75])) == 3.75

    def test_no_overflow(self):
        v = np.array([1e8, 1e8 - 3.0])
        out = log_sum_exp(v)
        assert np.isfinite(out) and out >= 1e8

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            log_sum_exp(np.array([]))

    def test_shift_property(self):
        rng = make_rng(3)
        for _ in range(50):
            v = rng.standard_normal(7) * 5
            c = float(rng.standard_normal()) * 10
            assert log_sum_exp(v + c) == pytest.approx(log_sum_exp(v) + c, abs=1e-12)


class TestSoftmaxRows:
    def test_uniform(self):
        npt.assert_allclose(softmax_rows(np.zeros((1, 3))),
                            np.full((1, 3), 1 / 3), rtol=0, atol=1e-15)

    def test_analytic(self):
        out = softmax_rows(np.array([[math.log(2), 0.0]]))
        npt.assert_allclose(out, [[2 / 3, 1 / 3]], rtol=0, atol=1e-15)

    def test_large_logit_stable(self):
        out = softmax_rows(np.array([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert out[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_rows_sum_to_one(self):
        rng = make_rng(4)
        logits = rng.standard_normal((1000, 9)) * 30
        sums = softmax_rows(logits).sum(axis=1)
        npt.assert_allclose(sums, 1.0, rtol=0, atol=1e-12)

    def test_entries_in_open_interval(self):
        rng = make_rng(5)
        p = softmax_rows(rng.standard_normal((100, 4)))
        assert np.all(p > 0) and np.all(p < 1)


class TestLayerNorm:
    def test_constant_input_zero(self):
        y, _ = layer_norm(np.full(6, 3.5), np.ones(6), np.zeros(6))
        npt.assert_allclose(y, 0.0, rtol=0, atol=1e-12)

    def test_unit_variance_case(self):
        y, _ = layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=1e-14)
        npt.assert_allclose(y, [1.0, -1.0], rtol=0, atol=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            layer_norm(np.zeros(4), np.ones(3), np.zeros(4))

    def test_backward_matches_finite_differences(self):
        rng = make_rng(6)
        d = 5
        x0 = rng.standard_normal(d)
        g0 = rng.standard_normal(d)
        b0 = rng.standard_normal(d)
        probe = rng.standard_normal(d)

        def f(vec):
            x, g, b = vec[:d], vec[d:2 * d], vec[2 * d:]
            y, cache = layer_norm(x, g, b)
            dx, dg, db = layer_norm_backward(cache, probe)
            return float(np.sum(y * probe)), np.concatenate([dx, dg, db])

        report = finite_diff_check(f, np.concatenate([x0, g0, b0]), tol=1e-6)
        assert report.passed, report


class TestGelu:
    def test_zero(self):
        assert gelu(0.0) == 0.0

    def test_asymptotic_identity(self):
        assert gelu(10.0) == pytest.approx(10.0, abs=1e-6)

    def test_monotone_on_grid(self):
        # GELU dips below zero with a stationary point near -0.75 and is
        # strictly increasing to the right of it
        xs = np.linspace(-0.7, 6, 200)
        ys = gelu(xs)
        assert np.all(np.diff(ys) > 0)

    def test_negative_tail_bounded(self):
        xs = np.linspace(-6, 0, 100)
        ys = gelu(xs)
        assert np.all(ys <= 0) and ys.min() > -0.2

    def test_derivative_matches_central_difference(self):
        def f(vec):
            return float(gelu(vec[0])), np.array([gelu_grad(vec[0])])

        report = finite_diff_check(f, np.array([0.5]), tol=1e-6)
        assert report.passed, report

    def test_with_grad_consistent(self):
        x = make_rng(7).standard_normal(100)
        v, g = gelu_with_grad(x)
        npt.assert_array_equal(v, gelu(x))
        npt.assert_array_equal(g, gelu_grad(x))


class TestDropoutMask:
    def test_rate_zero_all_ones(self):
        mask = dropout_mask((3, 4), 0.0, make_rng(0), train_mode=True)
        npt.assert_array_equal(mask, np.ones((3, 4)))

    def test_eval_mode_all_ones(self):
        mask = dropout_mask((3, 4), 0.5, make_rng(0), train_mode=False)
        npt.assert_array_equal(mask, np.ones((3, 4)))

    def test_rate_one_rejected(self):
        with pytest.raises(DomainError):
            dropout_mask((2,), 1.0, make_rng(0), True)

    def test_mean_matches_binomial_expectation(self):
        # mask entries are Bernoulli(keep)/keep; mean 1, var rate/keep
        n = 10 ** 6
        rate = 0.5
        mask = dropout_mask((n,), rate, make_rng(8), True)
        sigma = math.sqrt((rate / (1 - rate)) / n)
        assert abs(mask.mean() - 1.0) < 3 * sigma

    def test_values_binary(self):
        mask = dropout_mask((1000,), 0.3, make_rng(9), True)
        assert set(np.unique(mask)) <= {0.0, 1.0 / 0.7}

    def test_seed_reproducibility(self):
        a = dropout_mask((100, 7), 0.4, make_rng(10), True)
        b = dropout_mask((100, 7), 0.4, make_rng(10), True)
        npt.assert_array_equal(a, b)


class TestRng:
    def test_same_seed_same_stream(self):
        a = make_rng(123).standard_normal(50)
        b = make_rng(123).standard_normal(50)
        npt.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(make_rng(1).standard_normal(10),
                                  make_rng(2).standard_normal(10))


class TestFiniteDiffCheck:
    def test_square_function(self):
        def f(p):
            return float(p[0] ** 2), np.array([2.0 * p[0]])

        report = finite_diff_check(f, np.array([3.0]), tol=1e-8)
        assert report.passed
        assert report.max_rel_err < 1e-8

    def test_cross_entropy_logits(self):
        from lthead import build_class_stats, loss_eval, make_loss_spec
        stats = build_class_stats(np.array([0, 1, 2]), 3)
        spec = make_loss_spec("ce", stats)
        labels = np.array([1])

        def f(p):
            value, dl = loss_eval(spec, p.reshape(1, 3), labels, stats)
            return value, dl.ravel()

        report = finite_diff_check(f, np.array([0.2, -0.4, 1.1]), tol=1e-5)
        assert report.passed

    def test_wrong_gradient_fails(self):
        def f(p):
            return float(p[0] ** 2), np.array([4.0 * p[0]])  # off by 2x

        report = finite_diff_check(f, np.array([3.0]))
        assert not report.passed

    def test_non_finite_value_raises(self):
        def f(p):
            return float("nan"), np.zeros(1)

        with pytest.raises(EvaluationError):
            finite_diff_check(f, np.array([1.0]))
