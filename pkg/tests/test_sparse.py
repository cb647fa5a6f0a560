import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from support import entmax15_oracle, kkt_residual, projection_2d, simplex_projection
from tabular.autodiff import DTensor, entmax15, entmoid15, grad_check, kink_monitor, sparsemax, tsum
from tabular.autodiff.sparse import sparsemax_threshold

rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 9)), elements=st.floats(-20, 20))


def leaf(values):
    return DTensor(np.array(values, dtype=np.float64), requires_grad=True)


def on_simplex(p, tol=1e-9):
    return np.all(p >= 0) and np.all(np.abs(p.sum(axis=-1) - 1.0) <= tol)


class TestSparsemax:
    def test_saturates(self):
        assert_array_equal(sparsemax(leaf([[2.0, 0.0]])).data, [[1.0, 0.0]])

    def test_symmetric(self):
        assert_array_equal(sparsemax(leaf([[0.5, 0.5]])).data, [[0.5, 0.5]])

    def test_threshold_formula(self):
        # sorted [3, 1, 0.2]: k=2 gives tau = (3 + 1 - 1) / 2 = 1.5 > 1, so support is {0}
        assert sparsemax_threshold(np.array([[3.0, 1.0, 0.2]]))[0] == 2.0
        assert_allclose(sparsemax(leaf([[1.0, 0.8, -5.0]])).data, [[0.6, 0.4, 0.0]])

    def test_matches_closed_form_2d(self):
        rng = np.random.default_rng(0)
        for z in rng.normal(scale=2.0, size=(500, 2)):
            assert_allclose(sparsemax(leaf(z[None])).data[0], projection_2d(*z), atol=1e-12)

    def test_matches_bisection_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            z = rng.normal(scale=rng.uniform(0.1, 5.0), size=rng.integers(2, 17))
            p = sparsemax(leaf(z[None])).data[0]
            assert np.max(np.abs(p - simplex_projection(z))) < 1e-9
            assert kkt_residual(z, p) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(rows, st.floats(-100, 100))
    def test_shift_invariance(self, z, c):
        assert_allclose(sparsemax(leaf(z + c)).data, sparsemax(leaf(z)).data, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(rows, st.randoms(use_true_random=False))
    def test_permutation_equivariance(self, z, random):
        perm = list(range(z.shape[1]))
        random.shuffle(perm)
        assert_array_equal(sparsemax(leaf(z[:, perm])).data, sparsemax(leaf(z)).data[:, perm])

    @settings(max_examples=100, deadline=None)
    @given(rows)
    def test_on_simplex(self, z):
        assert on_simplex(sparsemax(leaf(z)).data)

    def test_backward_formula(self):
        z = leaf([[1.0, 0.8, -5.0, 0.7]])
        p = sparsemax(z)
        g = np.array([[1.0, 2.0, 3.0, 4.0]])
        from tabular.autodiff import backward

        backward(tsum(p * g))
        support = p.data[0] > 0
        expected = np.where(support, g[0] - g[0][support].mean(), 0.0)
        assert_allclose(z.grad[0], expected, rtol=1e-14)

    def test_gradient_away_from_kinks(self):
        rng = np.random.default_rng(2)
        checked = 0
        while checked < 20:
            z = leaf(rng.normal(size=(3, 6)))
            with kink_monitor() as km:
                sparsemax(z)
            if km.margin < 1e-3:
                continue
            probe = rng.normal(size=(3, 6))
            assert grad_check(lambda z: tsum(sparsemax(z) * probe), [z]) < 1e-4
            checked += 1

    def test_higher_rank(self):
        z = np.random.default_rng(3).normal(size=(2, 3, 4))
        out = sparsemax(leaf(z)).data
        assert_array_equal(out[1, 2], sparsemax(leaf(z[1, 2][None])).data[0])


class TestEntmax15:
    def test_uniform(self):
        for n in (2, 5, 16):
            assert_allclose(entmax15(leaf(np.full((1, n), 3.7))).data, np.full((1, n), 1.0 / n), atol=1e-12)

    def test_saturates(self):
        assert np.max(np.abs(entmax15(leaf([[10.0, 0.0]])).data - [[1.0, 0.0]])) <= 1e-9

    def test_matches_rational_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(40):
            z = rng.normal(scale=2.0, size=rng.integers(2, 9))
            assert np.max(np.abs(entmax15(leaf(z[None])).data[0] - entmax15_oracle(z))) < 1e-9

    def test_closed_form_two_way(self):
        # for [x, 0] with |x| < 2 the root is tau = (x - sqrt(8 - x^2)) / 2
        for x in np.linspace(-1.9, 1.9, 21):
            tau = (x - np.sqrt(8 - x * x)) / 2
            expected = ((x - tau) / 2) ** 2
            assert abs(entmax15(leaf([[x, 0.0]])).data[0, 0] - expected) < 1e-9

    @settings(max_examples=100, deadline=None)
    @given(rows)
    def test_on_simplex(self, z):
        assert on_simplex(entmax15(leaf(z)).data)

    @settings(max_examples=100, deadline=None)
    @given(rows, st.randoms(use_true_random=False))
    def test_permutation_equivariance(self, z, random):
        perm = list(range(z.shape[1]))
        random.shuffle(perm)
        assert_array_equal(entmax15(leaf(z[:, perm])).data, entmax15(leaf(z)).data[:, perm])

    def test_gradient(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            z = leaf(rng.normal(size=(1, 5)))
            probe = rng.normal(size=(1, 5))
            assert grad_check(lambda z: tsum(entmax15(z) * probe), [z]) < 1e-4

    def test_chain(self):
        rng = np.random.default_rng(6)
        W = leaf(rng.normal(size=(4, 5)))
        x = rng.normal(size=(3, 4))
        target = rng.normal(size=(3, 5))
        assert grad_check(lambda W: tsum((entmax15(DTensor(x) @ W) - target) ** 2), [W]) < 1e-4

    def test_sparser_than_softmax(self):
        p = entmax15(leaf([[4.0, 0.0, -1.0]])).data
        assert p[0, 2] == 0.0


class TestEntmoid15:
    def test_half(self):
        assert entmoid15(leaf([0.0])).data[0] == 0.5

    def test_saturated(self):
        assert_array_equal(entmoid15(leaf([4.0, 2.0, -4.0, -2.0])).data, [1.0, 1.0, 0.0, 0.0])

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 8, elements=st.floats(-10, 10)))
    def test_antisymmetry(self, x):
        assert_allclose(entmoid15(leaf(-x)).data, 1.0 - entmoid15(leaf(x)).data, atol=1e-15)

    def test_matches_two_way_entmax(self):
        xs = np.linspace(-3, 3, 61)
        pairs = np.stack([xs, np.zeros_like(xs)], axis=1)
        assert_allclose(entmoid15(leaf(xs)).data, entmax15(leaf(pairs)).data[:, 0], atol=1e-9)

    def test_monotone(self):
        y = entmoid15(leaf(np.linspace(-3, 3, 1001))).data
        assert np.all(np.diff(y) >= 0)

    def test_gradient(self):
        x = leaf(np.array([-1.7, -0.6, 0.1, 0.9, 1.5]))
        assert grad_check(lambda x: tsum(entmoid15(x) * x), [x]) < 1e-6
        outside = leaf(np.array([-3.0, 2.5]))
        from tabular.autodiff import backward

        backward(tsum(entmoid15(outside)))
        assert_array_equal(outside.grad, [0.0, 0.0])
