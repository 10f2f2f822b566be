import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import semaforge.tensor as T
from semaforge.errors import ContractError, DimensionError, GraphStateError
from semaforge.tensor import Tensor, backward, gradient_check


class TestMatmul:
    def test_identity_exact(self):
        col = Tensor([[3.0], [4.0]])
        out = T.matmul(Tensor(np.eye(2)), col)
        assert np.array_equal(out.data, [[3.0], [4.0]])

    def test_unanimous_vote(self):
        votes = Tensor([[1.0] * 6, [0.0] * 6])
        uniform = Tensor(np.full((6, 1), 1.0 / 6.0))
        out = T.matmul(votes, uniform)
        assert np.allclose(out.data, [[1.0], [0.0]])

    def test_probability_times_weights(self):
        # oracle: plain per-row dot products
        p0 = [0.8, 0.2, 0.6, 0.9, 0.7, 0.5]
        p1 = [1.0 - v for v in p0]
        w = [0.5, 0.1, 0.2, 0.9, 0.4, 0.3]
        expect = [sum(a * b for a, b in zip(p0, w)),
                  sum(a * b for a, b in zip(p1, w))]
        assert expect[0] == pytest.approx(1.78)
        assert expect[1] == pytest.approx(0.62)
        out = T.matmul(Tensor([p0, p1]), Tensor(np.array(w)[:, None]))
        assert np.allclose(out.data.ravel(), expect, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as err:
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
        assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)

    @given(st.integers(1, 5), st.integers(1, 5))
    @settings(max_examples=20, deadline=None)
    def test_identity_absorption(self, m, k):
        a = np.arange(m * k, dtype=float).reshape(m, k)
        assert np.array_equal(T.matmul(Tensor(a), Tensor(np.eye(k))).data, a)
        assert np.array_equal(T.matmul(Tensor(np.eye(m)), Tensor(a)).data, a)


class TestHadamard:
    def test_all_ones_identity(self, rng):
        a = rng.normal(size=(4, 5, 3))
        out = T.hadamard(Tensor(a), Tensor(np.ones((4, 5, 1))))
        assert np.array_equal(out.data, a)

    def test_all_zeros_annihilates(self, rng):
        a = rng.normal(size=(4, 5, 3))
        out = T.hadamard(Tensor(a), Tensor(np.zeros((4, 5, 1))))
        assert np.array_equal(out.data, np.zeros_like(a))

    def test_gate_replicates_across_channels(self):
        a = Tensor(np.ones((2, 2, 3)))
        gate = np.array([[0.5, 1.0], [0.0, 1.0]])[:, :, None]
        out = T.hadamard(a, Tensor(gate))
        # oracle: per-element loop
        expect = np.empty((2, 2, 3))
        for i in range(2):
            for j in range(2):
                for c in range(3):
                    expect[i, j, c] = 1.0 * gate[i, j, 0]
        assert np.array_equal(out.data, expect)

    def test_spatial_mismatch(self):
        with pytest.raises(DimensionError):
            T.hadamard(Tensor(np.ones((4, 4, 3))), Tensor(np.ones((3, 4, 1))))

    def test_multichannel_gate_rejected(self):
        with pytest.raises(DimensionError):
            T.hadamard(Tensor(np.ones((4, 4, 3))), Tensor(np.ones((4, 4, 2))))


class TestElementwise:
    def test_add_zeros(self, rng):
        x = rng.normal(size=(3, 3))
        assert np.array_equal(T.add(Tensor(x), Tensor(np.zeros((3, 3)))).data, x)

    def test_scale_one(self, rng):
        x = rng.normal(size=(3, 3))
        assert np.array_equal(T.scale(Tensor(x), 1.0).data, x)

    def test_sum_counts(self):
        assert T.tsum(Tensor(np.ones((3, 3)))).data == 9.0

    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        backward(T.tsum(x))
        assert np.array_equal(x.grad, np.ones((2, 2)))

    def test_quadratic_gradient(self):
        x = Tensor([2.0], requires_grad=True)
        backward(T.tsum(T.mul(x, x)))
        assert np.array_equal(x.grad, [4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(T.scale(x, 2.0))

    def test_backward_twice_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = T.tsum(x)
        backward(loss)
        with pytest.raises(GraphStateError):
            backward(loss)

    def test_gradient_accumulates_across_uses(self):
        x = Tensor([3.0], requires_grad=True)
        backward(T.add(T.tsum(x), T.tsum(x)))
        assert np.array_equal(x.grad, [2.0])

    def test_deterministic_bit_identical(self, rng):
        data = rng.normal(size=(4, 4))
        grads = []
        for _ in range(2):
            x = Tensor(data.copy(), requires_grad=True)
            y = T.tsum(T.mul(T.sigmoid(x), T.add(x, T.scale(x, 0.5))))
            backward(y)
            grads.append(x.grad.copy())
        assert np.array_equal(grads[0], grads[1])

    def test_no_grad_suppresses_tape(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = T.tsum(x)
        assert y._parents == () and not y.requires_grad


class TestGradientCheck:
    def test_linear_exact(self, rng):
        err = gradient_check(lambda t: T.tsum(t), Tensor(rng.normal(size=(3, 3))))
        assert err <= 1e-9

    def test_sigmoid_at_zero_quarter_slope(self):
        x = Tensor(np.zeros((2, 2)))
        xt = Tensor(x.data.copy(), requires_grad=True)
        backward(T.tsum(T.sigmoid(xt)))
        assert np.allclose(xt.grad, 0.25, atol=1e-15)
        assert gradient_check(lambda t: T.tsum(T.sigmoid(t)), x) < 1e-6

    def test_nonfinite_output_names_coordinate(self):
        def f(t):
            return T.tsum(T.log(T.exp(T.scale(t, 1000.0)), floor=0.0))

        with pytest.raises(ContractError) as err:
            gradient_check(f, Tensor(np.ones(2)))
        assert "coordinate" in str(err.value)

    @given(st.integers(1, 8), st.integers(1, 8))
    @settings(max_examples=10, deadline=None)
    def test_random_small_dims_mul_sigmoid(self, h, w):
        rng = np.random.Generator(np.random.PCG64(h * 31 + w))
        x = Tensor(rng.normal(size=(h, w)))
        a = Tensor(rng.normal(size=(h, w)))
        err = gradient_check(
            lambda t: T.tsum(T.mul(T.sigmoid(t), a)), x, 1e-5)
        assert err < 1e-4


class TestReductionsAndShapes:
    def test_sum_axis_gradient(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        backward(T.tsum(T.mul(T.tsum(x, axis=1), Tensor([1.0, 2.0, 3.0]))))
        assert np.array_equal(x.grad, np.repeat([[1.0], [2.0], [3.0]], 4, axis=1))

    def test_concat_roundtrip_gradient(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 1)), requires_grad=True)
        out = T.concat([a, b], axis=1)
        assert out.data.shape == (2, 4)
        backward(T.tsum(T.mul(out, out)))
        assert np.allclose(a.grad, 2 * a.data)
        assert np.allclose(b.grad, 2 * b.data)

    def test_mean(self):
        assert T.tmean(Tensor([1.0, 2.0, 3.0])).data == pytest.approx(2.0)

    def test_reshape_gradient(self, rng):
        x = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
        backward(T.tsum(T.mul(T.reshape(x, (3, 4)), Tensor(np.ones((3, 4))))))
        assert np.array_equal(x.grad, np.ones((2, 6)))


class TestLogDiv:
    def test_log_floor_clamps(self):
        out = T.log(Tensor([1e-20, 1.0]))
        assert out.data[0] == pytest.approx(np.log(1e-12))
        assert out.data[1] == 0.0

    def test_log_gradient_zero_below_floor(self):
        x = Tensor([1e-20, 2.0], requires_grad=True)
        backward(T.tsum(T.log(x)))
        assert x.grad[0] == 0.0
        assert x.grad[1] == pytest.approx(0.5)

    def test_div_values(self):
        out = T.div(Tensor([6.0, 9.0]), Tensor([2.0, 3.0]))
        assert np.array_equal(out.data, [3.0, 3.0])
