import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from supra import autodiff as ad
from supra.autodiff import (GradCheckError, ShapeError, Tape, backward, gelu,
                            grad_check, instance_norm, layer_norm, matmul,
                            softmax_rows, tsum)


def const(tape, x):
    return tape.constant(np.asarray(x, dtype=np.float64))


class TestMatmul:
    def test_identity(self):
        tape = Tape()
        eye = const(tape, np.eye(2))
        m = const(tape, [[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(eye, m).value, m.value)

    def test_small_product(self):
        tape = Tape()
        out = matmul(const(tape, [[1.0, 2.0]]), const(tape, [[3.0], [4.0]]))
        assert out.value.shape == (1, 1)
        assert out.value[0, 0] == pytest.approx(11.0)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 4))
        b = rng.standard_normal((4, 3))
        expected = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        tape = Tape()
        out = matmul(const(tape, a), const(tape, b)).value
        assert np.max(np.abs(out - expected)) < 1e-14

    def test_shape_mismatch_reports_dimensions(self):
        tape = Tape()
        with pytest.raises(ShapeError, match="2x3 @ 2x2"):
            matmul(const(tape, np.ones((2, 3))), const(tape, np.ones((2, 2))))


class TestSoftmaxRows:
    def test_uniform_row(self):
        tape = Tape()
        out = softmax_rows(const(tape, [[7.0, 7.0, 7.0, 7.0]])).value
        assert np.max(np.abs(out - 0.25)) < 1e-15

    def test_log_ratio(self):
        tape = Tape()
        out = softmax_rows(const(tape, [[0.0, np.log(3.0)]])).value
        assert np.max(np.abs(out - np.array([[0.25, 0.75]]))) < 1e-15

    def test_large_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 5))
        tape = Tape()
        base = softmax_rows(const(tape, x)).value
        shifted = softmax_rows(const(tape, x + 1000.0)).value
        assert np.max(np.abs(base - shifted)) < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)),
           arrays(np.float64, (4, 1), elements=st.floats(-100, 100)))
    def test_rows_sum_to_one_and_per_row_shift(self, x, shifts):
        tape = Tape()
        out = softmax_rows(const(tape, x)).value
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) < 1e-12
        shifted = softmax_rows(const(tape, x + shifts)).value
        assert np.max(np.abs(out - shifted)) < 1e-12

    def test_rejects_non_2d(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            softmax_rows(const(tape, np.ones(4)))


class TestNorms:
    def test_layer_norm_fixed_point(self):
        # a zero-mean unit-variance row moves only by O(eps)
        row = np.array([[-1.0, 1.0, -1.0, 1.0]])
        tape = Tape()
        out = layer_norm(const(tape, row), const(tape, np.ones(4)),
                         const(tape, np.zeros(4)), eps=1e-5).value
        assert np.max(np.abs(out - row)) < 1e-5

    def test_layer_norm_constant_row(self):
        tape = Tape()
        bias = np.array([0.5, -0.5, 1.0, 2.0])
        out = layer_norm(const(tape, np.ones((1, 4))), const(tape, np.ones(4)),
                         const(tape, bias), eps=1e-5).value
        assert out == pytest.approx(bias[None, :], abs=1e-12)

    def test_layer_norm_statistics(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((3, 64)) * 4 + 1
        tape = Tape()
        out = layer_norm(const(tape, x), const(tape, np.ones(64)),
                         const(tape, np.zeros(64)), eps=1e-10).value
        assert np.max(np.abs(out.mean(axis=1))) < 1e-12
        assert np.max(np.abs(out.var(axis=1) - 1.0)) < 1e-6

    def test_instance_norm_constant_channel(self):
        tape = Tape()
        out = instance_norm(const(tape, np.full((2, 5), 3.0)),
                            const(tape, np.ones(2)), const(tape, [1.0, -2.0])).value
        assert out == pytest.approx(np.array([[1.0] * 5, [-2.0] * 5]), abs=1e-12)

    def test_instance_norm_standardizes(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 500)) * 2 + 5
        tape = Tape()
        out = instance_norm(const(tape, x), const(tape, np.ones(1)),
                            const(tape, np.zeros(1)), eps=1e-10).value
        assert abs(out.mean()) < 1e-12
        assert abs(out.std() - 1.0) < 1e-6

    def test_instance_norm_zero_gain(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 7))
        tape = Tape()
        bias = np.array([1.0, 2.0, 3.0])
        out = instance_norm(const(tape, x), const(tape, np.zeros(3)),
                            const(tape, bias)).value
        assert out == pytest.approx(np.tile(bias[:, None], (1, 7)), abs=1e-12)


class TestGelu:
    def test_zero(self):
        tape = Tape()
        assert gelu(const(tape, [0.0])).value == pytest.approx([0.0], abs=0)

    def test_saturation(self):
        x = np.array([6.0, 8.0, 12.0])
        tape = Tape()
        out = gelu(const(tape, x)).value
        assert np.max(np.abs(out - x) / x) < 1e-6

    def test_odd_part_identity(self):
        # tanh is odd, so gelu(x) - gelu(-x) = x exactly for the tanh form
        x = np.linspace(-4, 4, 33)
        tape = Tape()
        diff = gelu(const(tape, x)).value - gelu(const(tape, -x)).value
        assert np.max(np.abs(diff - x)) < 1e-12

    def test_pins_tanh_formula(self):
        x = np.array([-1.7, 0.3, 2.2])
        expected = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
        tape = Tape()
        assert gelu(const(tape, x)).value == pytest.approx(expected, abs=1e-15)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        tape = Tape()
        x = tape.param(np.arange(6.0).reshape(2, 3))
        backward(tsum(x))
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_least_squares_closed_form(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((6, 4))
        b = rng.standard_normal((6, 1))
        x0 = rng.standard_normal((4, 1))
        tape = Tape()
        x = tape.param(x0)
        resid = ad.sub(matmul(const(tape, a), x), const(tape, b))
        backward(tsum(ad.square(resid)))
        expected = 2 * a.T @ (a @ x0 - b)
        assert np.max(np.abs(x.grad - expected)) < 1e-12

    def test_non_scalar_root_rejected(self):
        tape = Tape()
        x = tape.param(np.ones((2, 2)))
        with pytest.raises(ShapeError):
            backward(ad.mul(x, x))

    def test_bit_identical_gradients(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((8, 8))
        x0 = rng.standard_normal((8, 8))

        def run():
            tape = Tape()
            x = tape.param(x0)
            out = softmax_rows(matmul(x, const(tape, a)))
            backward(tsum(ad.square(out)))
            return x.grad

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)

    def test_unused_parameter_gets_zero_grad(self):
        tape = Tape()
        x = tape.param(np.ones(3))
        y = tape.param(np.ones(3))
        backward(tsum(x))
        assert np.array_equal(y.grad, np.zeros(3))


class TestGradCheck:
    def test_quadratic(self):
        rng = np.random.default_rng(7)
        theta = rng.standard_normal(10)
        err = grad_check(lambda tape, t: tsum(ad.square(t)), theta, h=1e-5)
        assert err < 1e-8

    def test_constant_function(self):
        err = grad_check(lambda tape, t: const(tape, 0.0) * tsum(t * 0.0),
                         np.ones(4), h=1e-5)
        assert err < 1e-10

    def test_composite_ops(self):
        rng = np.random.default_rng(8)
        w = rng.standard_normal((6, 6))

        def f(tape, t):
            hidden = gelu(matmul(t, const(tape, w)))
            out = softmax_rows(hidden)
            return tsum(ad.mul(out, const(tape, rng_mat)))

        rng_mat = rng.standard_normal((4, 6))
        assert grad_check(f, rng.standard_normal((4, 6)), h=1e-5) < 1e-6

    def test_h_range_enforced(self):
        with pytest.raises(ValueError):
            grad_check(lambda tape, t: tsum(t), np.ones(2), h=1e-2)

    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_non_finite_reported(self):
        def f(tape, t):
            return tsum(ad.sqrt(t))

        # sqrt probes negative territory when theta ~ 0
        with pytest.raises(GradCheckError, match="components"):
            grad_check(f, np.full(3, 1e-9), h=1e-5)


class TestLinearOp:
    def test_adjoint_checked_by_finite_differences(self):
        rng = np.random.default_rng(9)
        proj = rng.standard_normal((5, 3))

        def f(tape, t):
            out = ad.linear_op(t, lambda v: v @ proj, lambda g: g @ proj.T)
            return tsum(ad.square(out))

        assert grad_check(f, rng.standard_normal((2, 5)), h=1e-5) < 1e-7


class TestConcurrentTapes:
    def test_distinct_tapes_share_readonly_parameters(self):
        from concurrent.futures import ThreadPoolExecutor

        rng = np.random.default_rng(10)
        shared = rng.standard_normal((6, 6))
        inputs = [rng.standard_normal((4, 6)) for _ in range(8)]

        def run(x):
            tape = Tape()
            w = tape.param(shared)
            out = softmax_rows(matmul(tape.constant(x), w))
            backward(tsum(ad.square(out)))
            return w.grad

        sequential = [run(x) for x in inputs]
        with ThreadPoolExecutor(max_workers=4) as pool:
            threaded = list(pool.map(run, inputs))
        for a, b in zip(sequential, threaded):
            assert np.array_equal(a, b)
