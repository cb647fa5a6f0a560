from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from tabular.autodiff import (
    BatchNorm,
    DTensor,
    Linear,
    Module,
    ParamStore,
    affine,
    backward,
    batch_norm,
    concat,
    cross_entropy_logits,
    dropout,
    embedding_lookup,
    exp,
    getitem,
    glu,
    grad_check,
    log,
    log_softmax,
    matmul,
    mean,
    mse,
    relu,
    reshape,
    sigmoid,
    softmax,
    topological_order,
    transpose,
    tsum,
)
from tabular.autodiff.gradcheck import numeric_grad, relative_error
from tabular.errors import DegenerateBatch, IndexOutOfRange, NonScalarLoss, ShapeMismatch


def leaf(values):
    return DTensor(np.array(values, dtype=np.float64), requires_grad=True)


def away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2, x)


class TestAffine:
    def test_identity_weight(self):
        out = affine(leaf([[1.0, 2.0]]), leaf(np.eye(2)), leaf([0.0, 0.0]))
        assert_array_equal(out.data, [[1.0, 2.0]])

    def test_bias_only(self):
        out = affine(leaf([[0.0, 0.0]]), leaf(np.eye(2)), leaf([5.0, 5.0]))
        assert_array_equal(out.data, [[5.0, 5.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            affine(leaf(np.ones((2, 3))), leaf(np.ones((4, 2))))
        with pytest.raises(ShapeMismatch):
            affine(leaf(np.ones((2, 3))), leaf(np.ones((3, 2))), leaf(np.ones(3)))

    def test_gradient(self):
        rng = np.random.default_rng(0)
        x, W, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2))), leaf(rng.normal(size=2))
        probe = rng.normal(size=(3, 2))
        assert grad_check(lambda x, W, b: tsum(affine(x, W, b) * probe), [x, W, b]) < 1e-6

    def test_backward_formulas(self):
        rng = np.random.default_rng(1)
        x, W, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2))), leaf(rng.normal(size=2))
        dy = rng.normal(size=(3, 2))
        backward(tsum(affine(x, W, b) * dy))
        assert_allclose(x.grad, dy @ W.data.T, rtol=1e-14)
        assert_allclose(W.grad, x.data.T @ dy, rtol=1e-14)
        assert_allclose(b.grad, dy.sum(axis=0), rtol=1e-14)


class TestActivations:
    def test_relu(self):
        assert_array_equal(relu(leaf([-1.0, 2.0])).data, [0.0, 2.0])

    def test_relu_subgradient_at_zero(self):
        x = leaf([0.0, 1.0])
        backward(tsum(relu(x)))
        assert_array_equal(x.grad, [0.0, 1.0])

    def test_sigmoid(self):
        assert sigmoid(leaf([0.0])).data[0] == 0.5
        big = sigmoid(leaf([-800.0, 800.0])).data
        assert np.all(np.isfinite(big))
        assert_allclose(big, [0.0, 1.0])

    def test_glu(self):
        assert glu(leaf([[3.0, 0.0]])).data[0, 0] == 1.5

    def test_glu_odd_width(self):
        with pytest.raises(ShapeMismatch):
            glu(leaf([[1.0, 2.0, 3.0]]))

    @pytest.mark.parametrize("op", [relu, sigmoid, glu, exp, softmax, log_softmax])
    def test_gradients(self, op):
        rng = np.random.default_rng(2)
        x = leaf(away_from_zero(rng, (3, 4)))
        probe = rng.normal(size=op(x).shape)
        assert grad_check(lambda x: tsum(op(x) * probe), [x]) < 1e-6

    def test_log_gradient(self):
        rng = np.random.default_rng(3)
        x = leaf(rng.uniform(0.5, 2.0, size=(2, 3)))
        assert grad_check(lambda x: tsum(log(x) * x), [x]) < 1e-7


class TestSoftmax:
    def test_uniform(self):
        assert_array_equal(softmax(leaf([[0.0, 0.0]])).data, [[0.5, 0.5]])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_shift_invariance(self, z, c):
        assert_allclose(softmax(leaf(z + c)).data, softmax(leaf(z)).data, rtol=1e-12, atol=1e-300)

    def test_against_extended_precision(self):
        getcontext().prec = 50
        rng = np.random.default_rng(4)
        for _ in range(20):
            row = rng.normal(scale=5.0, size=7)
            exps = [Decimal(float(v)).exp() for v in row]
            total = sum(exps)
            oracle = np.array([float(e / total) for e in exps])
            assert np.max(np.abs(softmax(leaf(row[None])).data[0] - oracle)) < 1e-12

    def test_rows_sum_to_one(self):
        z = np.random.default_rng(5).normal(scale=30, size=(10, 6))
        assert_allclose(softmax(leaf(z)).data.sum(axis=1), 1.0, atol=1e-12)


class TestEmbedding:
    def test_gather(self):
        table = leaf([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        assert_array_equal(embedding_lookup(table, np.array([2, 0])).data, [[5.0, 6.0], [1.0, 2.0]])

    def test_repeated_index_accumulates(self):
        table = leaf(np.zeros((3, 2)))
        out = embedding_lookup(table, np.array([1, 1]))
        backward(tsum(out * np.array([[1.0, 2.0], [10.0, 20.0]])))
        assert_array_equal(table.grad, [[0.0, 0.0], [11.0, 22.0], [0.0, 0.0]])

    def test_out_of_range(self):
        with pytest.raises(IndexOutOfRange) as info:
            embedding_lookup(leaf(np.zeros((3, 2))), np.array([0, 7]))
        assert (info.value.position, info.value.index, info.value.size) == (1, 7, 3)


class TestBatchNorm:
    def test_normalises_with_population_variance(self):
        x = leaf([[1.0], [3.0]])
        rm, rv = np.zeros(1), np.ones(1)
        out = batch_norm(x, leaf([1.0]), leaf([0.0]), rm, rv, training=True, eps=0.0)
        assert_array_equal(out.data, [[-1.0], [1.0]])
        assert_allclose(rm, [0.2])
        assert_allclose(rv, [0.9 + 0.1 * 1.0])

    def test_inference_identity(self):
        x = leaf(np.random.default_rng(0).normal(size=(4, 3)))
        out = batch_norm(x, leaf(np.ones(3)), leaf(np.zeros(3)), np.zeros(3), np.ones(3), training=False)
        assert_allclose(out.data, x.data / np.sqrt(1 + 1e-5), rtol=1e-15)

    def test_degenerate(self):
        with pytest.raises(DegenerateBatch):
            batch_norm(leaf([[1.0, 2.0]]), leaf([1.0, 1.0]), leaf([0.0, 0.0]), np.zeros(2), np.ones(2), training=True)

    def test_gradient(self):
        rng = np.random.default_rng(6)
        x, g, b = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=3)), leaf(rng.normal(size=3))
        probe = rng.normal(size=(4, 3))

        def f(x, g, b):
            return tsum(batch_norm(x, g, b, np.zeros(3), np.ones(3), training=True) * probe)

        assert grad_check(f, [x, g, b]) < 1e-4

    def test_module_registers_buffers(self):
        bn = BatchNorm(3)
        assert [n for n, _ in bn.named_parameters()] == ["gamma", "beta"]
        assert [n for n, _ in bn.named_buffers()] == ["running_mean", "running_var"]


class TestDropout:
    def test_p_zero_is_identity(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        assert_array_equal(dropout(x, 0.0, True, np.random.default_rng(0)).data, x.data)

    def test_inference_is_identity(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        assert_array_equal(dropout(x, 0.7, False, None).data, x.data)

    def test_unbiased(self):
        x = leaf(np.full(100_000, 3.0))
        out = dropout(x, 0.4, True, np.random.default_rng(1)).data
        assert abs(out.mean() - 3.0) / 3.0 < 0.01
        assert set(np.unique(out)) <= {0.0, 3.0 / 0.6}

    def test_gradient_matches_mask(self):
        x = leaf(np.ones(50))
        out = dropout(x, 0.5, True, np.random.default_rng(2))
        backward(tsum(out))
        assert_array_equal(x.grad, out.data)

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            dropout(leaf([1.0]), 1.0, True, np.random.default_rng(0))


class TestLosses:
    def test_uniform_logits(self):
        assert abs(cross_entropy_logits(leaf([[0.0, 0.0]]), np.array([0])).item() - np.log(2)) < 1e-15

    def test_saturated(self):
        assert cross_entropy_logits(leaf([[100.0, 0.0]]), np.array([0])).item() < 1e-40

    def test_target_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            cross_entropy_logits(leaf([[0.0, 0.0]]), np.array([2]))

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(7)
        logits = leaf(rng.normal(size=(5, 3)))
        targets = rng.integers(0, 3, size=5)
        backward(cross_entropy_logits(logits, targets))
        p = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
        assert_allclose(logits.grad, (p - np.eye(3)[targets]) / 5, rtol=1e-12)
        assert grad_check(lambda z: cross_entropy_logits(z, targets), [logits]) < 1e-7

    def test_mse(self):
        assert mse(leaf([[1.0], [2.0]]), leaf([[1.0], [2.0]])).item() == 0.0
        assert mse(leaf([[0.0]]), leaf([[2.0]])).item() == 4.0
        with pytest.raises(ShapeMismatch):
            mse(leaf([[0.0], [1.0]]), leaf([[2.0]]))

    def test_mse_gradient(self):
        rng = np.random.default_rng(8)
        pred, target = leaf(rng.normal(size=(4, 1))), DTensor(rng.normal(size=(4, 1)))
        backward(mse(pred, target))
        assert_allclose(pred.grad, 2 * (pred.data - target.data) / 4, rtol=1e-14)
        assert grad_check(lambda p: mse(p, target), [pred]) < 1e-7


class TestBackward:
    def test_sum_gives_ones(self):
        W = leaf(np.arange(4.0).reshape(2, 2))
        backward(tsum(W))
        assert_array_equal(W.grad, np.ones((2, 2)))

    def test_fan_out(self):
        x = leaf([3.0])
        backward(tsum(x + x))
        assert_array_equal(x.grad, [2.0])

    def test_twice_doubles(self):
        rng = np.random.default_rng(9)
        W = leaf(rng.normal(size=(3, 3)))
        loss = tsum(relu(matmul(W, W)) * W)
        backward(loss)
        once = W.grad.copy()
        backward(loss)
        assert_array_equal(W.grad, 2 * once)

    def test_non_scalar(self):
        with pytest.raises(NonScalarLoss):
            backward(leaf([1.0, 2.0]) * 2.0)

    def test_topological_order(self):
        a = leaf([1.0])
        b = a * 2.0
        c = b + a
        d = c * b
        order = topological_order(d)
        position = {id(t): i for i, t in enumerate(order)}
        for t in order:
            for parent in t._parents:
                assert position[id(parent)] < position[id(t)]

    def test_deep_graph(self):
        # iterative traversal: no recursion limit on long chains
        x = leaf([1.0])
        y = x
        for _ in range(5000):
            y = y * 1.0
        backward(tsum(y))
        assert x.grad[0] == 1.0

    def test_composite_mlp(self):
        rng = np.random.default_rng(10)
        W1, b1 = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=5))
        W2, b2 = leaf(rng.normal(size=(5, 3))), leaf(rng.normal(size=3))
        x = rng.normal(size=(6, 4))
        targets = rng.integers(0, 3, size=6)

        def f(W1, b1, W2, b2):
            return cross_entropy_logits(affine(relu(affine(x, W1, b1)), W2, b2), targets)

        pre = x @ W1.data + b1.data
        assert np.min(np.abs(pre)) > 1e-3
        assert grad_check(f, [W1, b1, W2, b2]) < 1e-4


class TestShapes:
    @pytest.mark.parametrize(
        "fn",
        [
            lambda x: tsum(reshape(x, (4, 3)) * np.arange(12.0).reshape(4, 3)),
            lambda x: tsum(transpose(x) * np.arange(12.0).reshape(4, 3)),
            lambda x: tsum(getitem(x, (slice(None), [0, 2, 2])) ** 2),
            lambda x: tsum(concat([x, x * 2.0], axis=1) ** 2),
            lambda x: mean(x * x),
            lambda x: tsum(tsum(x, axis=0, keepdims=True) ** 2),
            lambda x: tsum((x / (x * x + 1.0)) - x),
            lambda x: tsum(matmul(x, transpose(x)) ** 2),
        ],
    )
    def test_gradients(self, fn):
        x = leaf(np.random.default_rng(11).normal(size=(3, 4)))
        assert grad_check(fn, [x]) < 1e-6

    def test_broadcast_unreduction(self):
        x, b = leaf(np.ones((3, 2))), leaf([1.0, 2.0])
        backward(tsum(x * b))
        assert_array_equal(b.grad, [3.0, 3.0])


class TestGradCheck:
    def test_quadratic_form(self):
        rng = np.random.default_rng(12)
        A = rng.normal(size=(4, 4))
        x = leaf(rng.normal(size=(4, 1)))
        assert grad_check(lambda x: tsum(matmul(transpose(x), matmul(DTensor(A), x))), [x]) < 1e-7

    def test_detects_wrong_gradient(self):
        x = leaf([1.0, 2.0])

        def broken(x):
            out = DTensor._from_op(x.data**2, (x,), lambda g: (g * x.data,), "broken_square")
            return tsum(out)

        assert grad_check(broken, [x]) > 0.1

    def test_numeric_grad_restores_input(self):
        x = leaf([1.0, 2.0])
        before = x.data.copy()
        numeric_grad(lambda: tsum(x * x), x)
        assert_array_equal(x.data, before)

    def test_relative_error_floor(self):
        assert relative_error(np.array([1e-12]), np.array([0.0]))[0] == pytest.approx(1e-4)


class TestModules:
    def test_param_store_order_and_uniqueness(self):
        store = ParamStore()
        store.add("b", leaf([1.0]))
        store.add("a", leaf([2.0]))
        assert list(store) == ["b", "a"]
        with pytest.raises(KeyError):
            store.add("a", leaf([3.0]))

    def test_dotted_names(self):
        class Net(Module):
            def __init__(self):
                super().__init__()
                self.fc = self.add_module("fc", Linear(2, 3, np.random.default_rng(0)))
                self.bn = self.add_module("bn", BatchNorm(3))

        net = Net()
        assert list(net.parameters()) == ["fc.weight", "fc.bias", "bn.gamma", "bn.beta"]
        assert [n for n, _ in net.state_arrays()][-2:] == ["bn.running_mean", "bn.running_var"]
        assert net.parameters().count() == 2 * 3 + 3 + 3 + 3

    def test_load_state_round_trip(self):
        a, b = Linear(2, 3, np.random.default_rng(0)), Linear(2, 3, np.random.default_rng(1))
        b.load_state_arrays(dict(a.state_arrays()))
        assert_array_equal(a.weight.data, b.weight.data)
        with pytest.raises(KeyError):
            b.load_state_arrays({"weight": a.weight.data})
        with pytest.raises(ValueError):
            b.load_state_arrays({"weight": np.zeros((3, 2)), "bias": np.zeros(3)})
