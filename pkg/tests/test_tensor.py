"""Tests for tensor module."""

import numpy as np
import pytest

from fgreid.exceptions import ShapeError
from fgreid.numerics import grad_check
from fgreid.tensor import (
    Tensor, concat, log, matmul, reduce_max, sigmoid, softmax, stack,
)


class TestTensorBasics:
    def test_defaults_to_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_keeps_float64(self):
        assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float64

    @pytest.mark.parametrize('reduce', [
        lambda x: x.sum(),
        lambda x: x.mean(),
        lambda x: x.max(),
        lambda x: x.min(),
        lambda x: x.sum(axis=1),
    ])
    def test_reductions_keep_float64(self, reduce):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.5]]))
        assert reduce(x).dtype == np.float64

    def test_float64_scalar_input(self):
        assert Tensor(np.float64(0.1)).dtype == np.float64
        assert Tensor(np.float64(0.1)).item() == 0.1

    def test_item_of_scalar(self):
        assert Tensor(np.array([2.5])).item() == 2.5

    def test_detach_drops_tape(self):
        t = Tensor([1.0, 2.0], requires_grad=True) * 2.0
        detached = t.detach()
        assert not detached.requires_grad
        np.testing.assert_array_equal(detached.data, t.data)

    def test_reflected_operators(self):
        t = Tensor([1.0, 2.0])
        np.testing.assert_allclose((1.0 - t).data, [0.0, -1.0])
        np.testing.assert_allclose((4.0 / t).data, [4.0, 2.0])
        np.testing.assert_allclose((-t).data, [-1.0, -2.0])


class TestBackward:
    def test_broadcast_add(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        (a + b).sum().backward()
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_reused_node_accumulates(self):
        a = Tensor([3.0], requires_grad=True)
        (a * a).sum().backward()
        np.testing.assert_allclose(a.grad, [6.0])

    def test_non_scalar_needs_gradient(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            (a * 2.0).backward()

    def test_max_ties_share_gradient(self):
        a = Tensor([1.0, 3.0, 3.0], requires_grad=True)
        reduce_max(a).backward()
        np.testing.assert_allclose(a.grad, [0.0, 0.5, 0.5])

    def test_getitem_repeated_index(self):
        a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        a[[0, 0, 2]].sum().backward()
        np.testing.assert_allclose(a.grad, [2.0, 0.0, 1.0])

    def test_log_floor_blocks_gradient(self):
        a = Tensor([0.0, 1.0], requires_grad=True)
        out = log(a, floor=1e-12)
        np.testing.assert_allclose(out.data, [np.log(np.float32(1e-12)), 0.0], rtol=1e-6)
        out.sum().backward()
        np.testing.assert_allclose(a.grad, [0.0, 1.0])

    def test_concat_splits_gradient(self):
        a = Tensor(np.ones((2, 1)), requires_grad=True)
        b = Tensor(np.ones((2, 2)), requires_grad=True)
        out = concat([a, b], axis=1)
        assert out.shape == (2, 3)
        (out * np.array([1.0, 2.0, 3.0])).sum().backward()
        np.testing.assert_allclose(a.grad, [[1.0], [1.0]])
        np.testing.assert_allclose(b.grad, [[2.0, 3.0], [2.0, 3.0]])

    def test_untracked_input_gets_no_gradient(self):
        a = Tensor([1.0], requires_grad=True)
        b = Tensor([2.0])
        (a * b).sum().backward()
        assert b.grad is None


class TestShapeErrors:
    def test_matmul_inner_dims(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))).sum(axis=2)

    def test_mean_over_empty_axis(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((0, 3))).mean(axis=0)


class TestOperationGradients:
    @pytest.fixture
    def rng(self):
        return np.random.default_rng(7)

    def test_elementwise(self, rng):
        x = rng.uniform(-1, 1, size=(3, 4))
        assert grad_check(lambda t: (t * t + t / (t * t + 1.0)).exp(), x) <= 1e-3

    def test_sqrt_and_power(self, rng):
        x = rng.uniform(0.5, 1.5, size=(5,))
        assert grad_check(lambda t: t.sqrt() + t ** 3, x) <= 1e-3

    def test_sigmoid(self, rng):
        assert grad_check(sigmoid, rng.uniform(-1, 1, size=(6,))) <= 1e-3

    def test_matmul(self, rng):
        inputs = {'a': rng.uniform(-1, 1, size=(2, 3, 4)), 'b': rng.uniform(-1, 1, size=(4, 2))}
        assert grad_check(lambda d: matmul(d['a'], d['b']), inputs) <= 1e-3

    def test_softmax(self, rng):
        assert grad_check(lambda t: softmax(t, axis=0), rng.uniform(-1, 1, size=(4, 3))) <= 1e-3

    def test_stack_and_transpose(self, rng):
        inputs = {'a': rng.uniform(-1, 1, size=(2, 3)), 'b': rng.uniform(-1, 1, size=(2, 3))}
        assert grad_check(lambda d: stack([d['a'], d['b'] * 2.0], axis=1).transpose(2, 0, 1), inputs) <= 1e-3

    def test_min_max_reductions(self, rng):
        x = rng.permutation(np.linspace(-1, 1, 12)).reshape(3, 4)
        assert grad_check(lambda t: t.max(axis=1) - t.min(axis=0).sum(), x) <= 1e-3
