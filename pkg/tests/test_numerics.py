import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from micron.errors import NumericError, ShapeError
from micron.numerics import FFNParams, ParamTensor, ffn_apply, ffn_backward, ffn_forward, grad_check, linear_apply, sigmoid



class TestSigmoid:
    def test_zero(self):
        assert sigmoid([0.0])[0] == 0.5

    def test_symmetry(self):
        x = np.array([1.7, -0.3])
        np.testing.assert_allclose(sigmoid(-x), 1 - sigmoid(x), rtol=0, atol=1e-15)

    def test_ln3(self):
        # 1 / (1 + 1/3) = 3/4
        assert sigmoid([math.log(3.0)])[0] == pytest.approx(0.75, abs=1e-15)

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            sigmoid([np.nan])
        with pytest.raises(NumericError):
            sigmoid([np.inf])

    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-30, 30)))
    def test_open_interval(self, x):
        s = sigmoid(x)
        assert np.all(s > 0) and np.all(s < 1)

    @given(st.floats(-30, 30), st.floats(0.01, 5))
    def test_monotone(self, a, step):
        assert sigmoid([a + step])[0] > sigmoid([a])[0]


class TestLinearApply:
    def test_identity(self):
        np.testing.assert_array_equal(linear_apply(np.eye(2), [2.0, 3.0]), [2.0, 3.0])

    def test_zero(self):
        np.testing.assert_array_equal(linear_apply(np.zeros((3, 2)), [2.0, 3.0]), np.zeros(3))

    def test_hand_product(self):
        np.testing.assert_array_equal(linear_apply([[1, 2], [3, 4]], [1, 1]), [3, 7])

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            linear_apply(np.eye(2), [1.0, 2.0, 3.0])

    def test_distributes_over_subtraction(self, rng):
        for _ in range(50):
            W = rng.normal(size=(5, 7))
            a, b = rng.normal(size=7), rng.normal(size=7)
            lhs = linear_apply(W, a - b)
            rhs = linear_apply(W, a) - linear_apply(W, b)
            assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(lhs)))


def _ffn(W1, b1, W2, b2, activation="relu"):
    return FFNParams(ParamTensor(W1), ParamTensor(b1), ParamTensor(W2), ParamTensor(b2), activation)


class TestFFN:
    def test_zero_params(self):
        f = _ffn(np.zeros((3, 2)), np.zeros(3), np.zeros((2, 3)), np.zeros(2))
        np.testing.assert_array_equal(ffn_apply(f, [1.0, -4.0]), [0.0, 0.0])

    def test_relu_kills_negative(self):
        f = _ffn(np.eye(2), np.zeros(2), np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(ffn_apply(f, [-1.0, 2.0]), [0.0, 2.0])

    def test_bias_passthrough(self):
        f = _ffn(np.zeros((2, 2)), np.zeros(2), np.zeros((2, 2)), np.array([5.0, 5.0]))
        np.testing.assert_array_equal(ffn_apply(f, [3.0, 1.0]), [5.0, 5.0])

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            _ffn(np.zeros((3, 2)), np.zeros(2), np.zeros((2, 3)), np.zeros(2))
        f = _ffn(np.eye(2), np.zeros(2), np.eye(2), np.zeros(2))
        with pytest.raises(ShapeError):
            ffn_apply(f, [1.0])

    def test_backward_matches_finite_differences(self, rng):
        f = FFNParams.init(4, 6, 3, rng)
        x = rng.normal(size=4)
        w = rng.normal(size=3)
        tensors = list(f.tensors().values())

        def loss():
            y, cache = ffn_forward(f, x)
            ffn_backward(f, cache, w)
            return float(w @ y)

        assert grad_check(loss, tensors, eps=1e-5) < 1e-6


class TestGradCheck:
    def test_quadratic(self):
        theta = ParamTensor([1.0, 2.0])

        def loss():
            theta.grad += 2 * theta.value
            return float(theta.value @ theta.value)

        assert grad_check(loss, [theta]) < 1e-9
        np.testing.assert_allclose(theta.grad, [2.0, 4.0])

    def test_constant(self):
        theta = ParamTensor([1.0, -3.0])
        assert grad_check(lambda: 7.0, [theta]) == 0.0
        np.testing.assert_array_equal(theta.grad, [0.0, 0.0])

    def test_non_finite_loss(self):
        theta = ParamTensor([1.0])
        with pytest.raises(NumericError):
            grad_check(lambda: float("nan"), [theta])

    def test_eps_range(self):
        with pytest.raises(ValueError):
            grad_check(lambda: 0.0, [ParamTensor([1.0])], eps=0.1)

    def test_restores_parameters(self):
        theta = ParamTensor([0.3, -0.7])
        before = theta.value.copy()

        def loss():
            theta.grad += np.cos(theta.value)
            return float(np.sum(np.sin(theta.value)))

        assert grad_check(loss, [theta]) < 1e-8
        np.testing.assert_array_equal(theta.value, before)


def test_param_tensor_grad_shape():
    with pytest.raises(ShapeError):
        ParamTensor(np.zeros(3), np.zeros(2))
