"""Tensor primitives: values, gradients vs finite differences, invariants."""

import numpy as np
import pytest

from xmodal import tensor as T
from xmodal.errors import (ContractError, DegenerateInputError, DomainError,
                           ShapeMismatchError)


def grad_of(f, x0):
    """Analytic gradient of scalar f at x0 via the tape."""
    x = T.Tensor(x0, grad_enabled=True)
    T.backward(f(x))
    return x.grad


def fd_of(f, x0, h=1e-5):
    return T.finite_diff_grad(f, x0, h=h).data


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(T.Tensor(a), T.Tensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_computed(self):
        out = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))

    def test_gradient_both_inputs(self):
        rng = np.random.default_rng(0)
        a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        f_a = lambda x: T.tsum(T.matmul(x, T.Tensor(b0)))
        f_b = lambda x: T.tsum(T.matmul(T.Tensor(a0), x))
        assert T.rel_error(grad_of(f_a, a0), fd_of(f_a, a0)) < 1e-6
        assert T.rel_error(grad_of(f_b, b0), fd_of(f_b, b0)) < 1e-6


class TestElementwise:
    def test_softplus_at_zero(self):
        assert T.softplus(T.Tensor(0.0)).item() == pytest.approx(np.log(2), abs=1e-12)

    def test_tanh_at_zero(self):
        assert T.tanh(T.Tensor(0.0)).item() == 0.0

    def test_softplus_gradient_is_sigmoid(self):
        g = grad_of(lambda x: T.tsum(T.softplus(x)), np.array([1.0]))
        sigmoid1 = 1 / (1 + np.exp(-1.0))
        assert g[0] == pytest.approx(sigmoid1, abs=1e-10)
        assert T.rel_error(g, fd_of(lambda x: T.tsum(T.softplus(x)), np.array([1.0]))) < 1e-8

    def test_log_domain_error(self):
        with pytest.raises(DomainError):
            T.log(T.Tensor([-1.0]))

    def test_dispatch(self):
        out = T.elementwise("add", T.Tensor([1.0]), T.Tensor([2.0]))
        assert out.data[0] == 3.0
        with pytest.raises(ContractError):
            T.elementwise("nope", T.Tensor([1.0]))

    @pytest.mark.parametrize("name,f", [
        ("add", lambda x: T.tsum(T.add(x, T.Tensor(np.full(5, 0.3))))),
        ("sub", lambda x: T.tsum(T.sub(x, T.Tensor(np.full(5, 0.3))))),
        ("mul", lambda x: T.tsum(T.mul(x, T.Tensor(np.linspace(-1, 1, 5))))),
        ("scale", lambda x: T.tsum(T.scale(x, 2.5))),
        ("tanh", lambda x: T.tsum(T.tanh(x))),
        ("softplus", lambda x: T.tsum(T.softplus(x))),
        ("exp", lambda x: T.tsum(T.exp(x))),
    ])
    def test_gradients_100_random_points(self, name, f):
        rng = np.random.default_rng(hash(name) % 2**32)
        for _ in range(100):
            x0 = rng.normal(size=5)
            assert T.rel_error(grad_of(f, x0), fd_of(f, x0)) < 1e-5

    def test_relu_gradient_away_from_kink(self):
        rng = np.random.default_rng(1)
        f = lambda x: T.tsum(T.relu(x))
        for _ in range(100):
            x0 = rng.normal(size=5)
            x0[np.abs(x0) < 1e-3] = 0.5  # finite differences straddle the kink
            assert T.rel_error(grad_of(f, x0), fd_of(f, x0)) < 1e-5

    def test_log_gradient(self):
        rng = np.random.default_rng(2)
        f = lambda x: T.tsum(T.log(x))
        for _ in range(100):
            x0 = rng.uniform(0.1, 3.0, size=5)
            assert T.rel_error(grad_of(f, x0), fd_of(f, x0)) < 1e-5


class TestL2Normalize:
    def test_closed_form(self):
        out = T.l2_normalize(T.Tensor([3.0, 4.0]))
        np.testing.assert_allclose(out.data, [0.6, 0.8], atol=1e-15)

    def test_unit_vector_unchanged(self):
        v = np.array([1.0, 0.0, 0.0])
        np.testing.assert_array_equal(T.l2_normalize(T.Tensor(v)).data, v)

    def test_unit_norm_random(self):
        rng = np.random.default_rng(3)
        v = rng.normal(size=16)
        assert abs(np.linalg.norm(T.l2_normalize(T.Tensor(v)).data) - 1.0) < 1e-12

    def test_idempotent_bit_exact(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            v = rng.normal(size=8)
            once = T.l2_normalize(T.Tensor(v)).data
            twice = T.l2_normalize(T.Tensor(once)).data
            np.testing.assert_array_equal(once, twice)

    def test_degenerate_passthrough_warns(self):
        v = np.zeros(4)
        with pytest.warns(T.DegenerateVectorWarning):
            out = T.l2_normalize(T.Tensor(v))
        np.testing.assert_array_equal(out.data, v)

    def test_gradient_with_dot(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=6)
        f = lambda x: T.dot(T.l2_normalize(x), T.Tensor(w))
        x0 = rng.normal(size=6)
        assert T.rel_error(grad_of(f, x0), fd_of(f, x0)) < 1e-6


class TestCosineSimilarity:
    def test_self_similarity(self):
        v = np.array([1.0, 2.0, -3.0])
        assert T.cosine_similarity(T.Tensor(v), T.Tensor(v)).item() == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        s = T.cosine_similarity(T.Tensor([1.0, 0.0]), T.Tensor([0.0, 1.0]))
        assert s.item() == pytest.approx(0.0, abs=1e-15)

    def test_closed_form(self):
        s = T.cosine_similarity(T.Tensor([1.0, 1.0]), T.Tensor([1.0, 0.0]))
        assert s.item() == pytest.approx(1 / np.sqrt(2), abs=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(DegenerateInputError):
            T.cosine_similarity(T.Tensor([0.0, 0.0]), T.Tensor([1.0, 0.0]))

    def test_bounds_and_symmetry(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            u, v = rng.normal(size=7), rng.normal(size=7)
            s_uv = T.cosine_similarity(T.Tensor(u), T.Tensor(v)).item()
            s_vu = T.cosine_similarity(T.Tensor(v), T.Tensor(u)).item()
            assert -1 - 1e-12 <= s_uv <= 1 + 1e-12
            assert s_uv == pytest.approx(s_vu, abs=1e-14)

    def test_gradient(self):
        rng = np.random.default_rng(7)
        v = rng.normal(size=6)
        f = lambda x: T.cosine_similarity(x, T.Tensor(v))
        for _ in range(10):
            u0 = rng.normal(size=6)
            assert T.rel_error(grad_of(f, u0), fd_of(f, u0)) < 1e-5


class TestEuclideanDistance:
    def test_zero_at_coincidence(self):
        v = np.array([1.0, 2.0])
        assert T.euclidean_distance(T.Tensor(v), T.Tensor(v)).item() == 0.0

    def test_closed_form(self):
        d = T.euclidean_distance(T.Tensor([0.0, 0.0]), T.Tensor([3.0, 4.0]))
        assert d.item() == 5.0

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            T.euclidean_distance(T.Tensor([1.0]), T.Tensor([1.0, 2.0]))

    def test_triangle_inequality(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            a, b, c = rng.normal(size=(3, 5))
            d = lambda u, v: T.euclidean_distance(T.Tensor(u), T.Tensor(v)).item()
            assert d(a, c) <= d(a, b) + d(b, c) + 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(9)
        v = rng.normal(size=5)
        f = lambda x: T.euclidean_distance(x, T.Tensor(v))
        for _ in range(10):
            u0 = rng.normal(size=5)
            assert T.rel_error(grad_of(f, u0), fd_of(f, u0)) < 1e-5


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = T.Tensor(np.arange(5.0), grad_enabled=True)
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones(5))

    def test_non_scalar_rejected(self):
        x = T.Tensor(np.ones(3), grad_enabled=True)
        with pytest.raises(ContractError):
            T.backward(x)

    def test_fanout_accumulates(self):
        # y = sum(x*x) + sum(x): x feeds two consumers
        def f(x):
            return T.add(T.tsum(T.mul(x, x)), T.tsum(x))
        rng = np.random.default_rng(10)
        x0 = rng.normal(size=6)
        np.testing.assert_allclose(grad_of(f, x0), 2 * x0 + 1, atol=1e-12)
        assert T.rel_error(grad_of(f, x0), fd_of(f, x0)) < 1e-6

    def test_leaf_gradient_map(self):
        x = T.Tensor([2.0], grad_enabled=True)
        y = T.Tensor([3.0], grad_enabled=True)
        leaf = T.backward(T.tsum(T.mul(x, y)))
        np.testing.assert_array_equal(leaf[x.node_id], [3.0])
        np.testing.assert_array_equal(leaf[y.node_id], [2.0])


class TestAuxiliaryPrimitives:
    def test_rows_l2_normalize_gradient(self):
        rng = np.random.default_rng(11)
        w = rng.normal(size=(4, 6))
        f = lambda x: T.tsum(T.mul(T.rows_l2_normalize(x), T.Tensor(w)))
        x0 = rng.normal(size=(4, 6))
        assert T.rel_error(grad_of(f, x0), fd_of(f, x0)) < 1e-6

    def test_gather_rows_gradient_scatter_adds(self):
        f = lambda x: T.tsum(T.gather_rows(x, [0, 0, 2]))
        x0 = np.arange(9.0).reshape(3, 3)
        np.testing.assert_array_equal(
            grad_of(f, x0),
            np.array([[2.0] * 3, [0.0] * 3, [1.0] * 3]))

    def test_masked_row_logsumexp_matches_naive(self):
        rng = np.random.default_rng(12)
        x0 = rng.normal(size=(5, 5)) * 3
        mask = np.ones((5, 5), dtype=bool)
        np.fill_diagonal(mask, False)
        out = T.masked_row_logsumexp(T.Tensor(x0), mask)
        naive = [np.log(sum(np.exp(x0[i, q]) for q in range(5) if q != i))
                 for i in range(5)]
        np.testing.assert_allclose(out.data, naive, atol=1e-12)
        f = lambda x: T.tsum(T.masked_row_logsumexp(x, mask))
        assert T.rel_error(grad_of(f, x0), fd_of(f, x0)) < 1e-6

    def test_masked_row_logsumexp_empty_row(self):
        with pytest.raises(ContractError):
            T.masked_row_logsumexp(T.Tensor(np.ones((2, 2))),
                                   np.array([[True, True], [False, False]]))

    def test_add_rowvec_gradient(self):
        rng = np.random.default_rng(13)
        x0, b0 = rng.normal(size=(3, 4)), rng.normal(size=4)
        f_b = lambda b: T.tsum(T.tanh(T.add_rowvec(T.Tensor(x0), b)))
        assert T.rel_error(grad_of(f_b, b0), fd_of(f_b, b0)) < 1e-6


class TestFiniteDiff:
    def test_sum_of_squares_closed_form(self):
        g = fd_of(lambda x: T.tsum(T.mul(x, x)), np.array([1.0, 2.0]))
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)

    def test_h_must_be_positive(self):
        with pytest.raises(ContractError):
            T.finite_diff_grad(lambda x: T.tsum(x), np.ones(2), h=0.0)

    def test_matches_softplus_on_random_vectors(self):
        rng = np.random.default_rng(14)
        f = lambda x: T.tsum(T.softplus(x))
        for _ in range(10):
            x0 = rng.normal(size=6)
            assert T.rel_error(grad_of(f, x0), fd_of(f, x0)) < 1e-6
