"""Autodiff core: op semantics, softmax/masking guarantees, gradient checks."""

import math

import numpy as np
import pytest

from twopass_kws.nn import Tensor, ShapeError, grad_check, no_grad, using_dtype
from twopass_kws.nn import tensor as T


class TestBasicOps:
    def test_add_shapes(self):
        a = Tensor(np.ones((2, 3)))
        with pytest.raises(ShapeError):
            T.add(a, Tensor(np.ones((3, 2))))

    def test_bias_broadcast(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.array([1.0, 2.0, 3.0]))
        out = T.add(a, b)
        assert np.allclose(out.data, [[1, 2, 3], [1, 2, 3]])

    def test_matmul_grad_accumulates_across_uses(self, f64):
        x = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
        y = T.add(T.tsum(T.mul(x, x)), T.tsum(x))  # x used twice
        y.backward()
        assert np.allclose(x.grad, [[3.0, 5.0]])

    def test_no_grad_blocks_graph(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with no_grad():
            y = T.mul(x, x)
        assert y.requires_grad is False and y._backward is None

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = T.mul(x, 2.0)
        with pytest.raises(ValueError):
            y.backward()

    def test_concat_rows_roundtrip(self, f64):
        a = Tensor(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
        b = Tensor(np.arange(3, dtype=float).reshape(1, 3), requires_grad=True)
        out = T.concat([a, b], axis=0)
        assert out.shape == (3, 3)
        T.tsum(T.rows(out, 2, 3)).backward()
        assert np.allclose(a.grad, 0.0) and np.allclose(b.grad, 1.0)


class TestSoftmax:
    def test_rows_sum_to_one(self, rng):
        x = Tensor(rng.normal(size=(5, 7)))
        p = T.masked_softmax_rows(x)
        assert np.allclose(p.data.sum(axis=1), 1.0, atol=1e-6)

    def test_masked_positions_exactly_zero(self, rng):
        x = Tensor(rng.normal(size=(4, 6)))
        mask = rng.random((4, 6)) > 0.4
        mask[:, 0] = True
        p = T.masked_softmax_rows(x, mask)
        assert (p.data[~mask] == 0.0).all()
        assert np.allclose(p.data.sum(axis=1), 1.0, atol=1e-6)

    def test_all_masked_row_is_error(self):
        x = Tensor(np.zeros((2, 3)))
        mask = np.array([[True, False, False], [False, False, False]])
        with pytest.raises(ValueError):
            T.masked_softmax_rows(x, mask)

    def test_log_softmax_shift_invariance(self, rng):
        x = rng.normal(size=(3, 5))
        a = T.log_softmax_rows(Tensor(x))
        b = T.log_softmax_rows(Tensor(x + 7.25))
        assert np.allclose(a.data, b.data, atol=1e-6)


class TestGradCheck:
    def test_quadratic_gradient(self, f64):
        x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
        err = grad_check(lambda: T.tsum(T.mul(x, x)), [x])
        assert err < 1e-8

    @pytest.mark.parametrize(
        "op",
        [T.tanh, T.sigmoid, T.exp, T.relu, lambda t: T.log(T.add(T.mul(t, t), 1.0))],
        ids=["tanh", "sigmoid", "exp", "relu", "log"],
    )
    def test_elementwise_ops(self, f64, rng, op):
        x = Tensor(rng.normal(size=(3, 4)) + 0.1, requires_grad=True)
        err = grad_check(lambda: T.tsum(op(x)), [x])
        assert err < 1e-6

    def test_masked_softmax_grad(self, f64, rng):
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        mask = np.ones((3, 5), bool)
        mask[0, 2:] = False
        w = Tensor(rng.normal(size=(3, 5)))

        def f():
            return T.tsum(T.mul(T.masked_softmax_rows(x, mask), w))

        assert grad_check(f, [x]) < 1e-6

    def test_log_softmax_grad(self, f64, rng):
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        idx = np.array([0, 3, 5, 2])
        err = grad_check(lambda: T.neg(T.tmean(T.pick_rows(T.log_softmax_rows(x), idx))), [x])
        assert err < 1e-6

    def test_layer_norm_grad(self, f64, rng):
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        gamma = Tensor(rng.normal(size=6) + 1.0, requires_grad=True)
        beta = Tensor(rng.normal(size=6), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 6)))
        err = grad_check(lambda: T.tsum(T.mul(T.layer_norm_rows(x, gamma, beta), w)), [x, gamma, beta])
        assert err < 1e-6

    def test_conv2d_grad(self, f64, rng):
        x = Tensor(rng.normal(size=(2, 9, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        err = grad_check(lambda: T.tsum(T.tanh(T.conv2d_stride2(x, w, b))), [x, w, b])
        assert err < 1e-6

    def test_dwconv_grad(self, f64, rng):
        x = Tensor(rng.normal(size=(8, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        err = grad_check(lambda: T.tsum(T.tanh(T.dwconv1d_valid(x, w))), [x, w])
        assert err < 1e-6

    def test_gather_and_take_grads(self, f64, rng):
        table = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        vec = Tensor(rng.normal(size=7), requires_grad=True)
        ids = np.array([0, 2, 2, 4])
        idx2d = np.array([[0, 6], [3, 3]])

        def f():
            return T.add(T.tsum(T.mul(T.gather_rows(table, ids), 2.0)), T.tsum(T.take1d(vec, idx2d)))

        assert grad_check(f, [table, vec]) < 1e-8


class TestDeterminism:
    def test_forward_deterministic(self, rng):
        x = rng.normal(size=(6, 6))
        w = rng.normal(size=(6, 6))
        a = T.matmul(T.tanh(Tensor(x)), Tensor(w)).data
        b = T.matmul(T.tanh(Tensor(x)), Tensor(w)).data
        assert np.array_equal(a, b)
