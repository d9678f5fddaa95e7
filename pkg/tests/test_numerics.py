import numpy as np
import pytest

from oodlab import model
from oodlab.errors import (
    DimensionMismatch,
    NonFiniteValue,
    NotPositiveDefinite,
    NotSymmetric,
)
from oodlab.numerics import (
    SpdFactor,
    cholesky,
    input_gradient_check,
    quadratic_form,
    regularize_spd,
    spd_solve,
)

from conftest import random_spd


def naive_inverse(m):
    """Gauss elimination with partial pivoting; the independent oracle."""
    n = len(m)
    aug = np.hstack([np.asarray(m, dtype=float), np.eye(n)])
    for i in range(n):
        p = int(np.argmax(np.abs(aug[i:, i]))) + i
        aug[[i, p]] = aug[[p, i]]
        aug[i] = aug[i] / aug[i, i]
        for j in range(n):
            if j != i:
                aug[j] -= aug[j, i] * aug[i]
    return aug[:, n:]


class TestCholesky:
    def test_identity(self):
        f = cholesky(np.eye(3))
        assert np.array_equal(f.lower, np.eye(3))

    def test_diagonal(self):
        f = cholesky(np.array([[4.0, 0.0], [0.0, 9.0]]))
        assert np.array_equal(f.lower, np.array([[2.0, 0.0], [0.0, 3.0]]))

    def test_reconstruction_random_spd(self):
        rng = np.random.default_rng(0)
        m = random_spd(rng, 8)
        f = cholesky(m)
        err = np.linalg.norm(f.reconstruct() - m) / np.linalg.norm(m)
        assert err < 1e-8

    def test_not_symmetric(self):
        with pytest.raises(NotSymmetric):
            cholesky(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_not_positive_definite(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky(np.array([[1.0, 0.0], [0.0, -1.0]]))

    def test_non_square(self):
        with pytest.raises(DimensionMismatch):
            cholesky(np.zeros((2, 3)))

    def test_reconstruction_many_seeds(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            dim = int(rng.integers(2, 12))
            m = random_spd(rng, dim)
            f = cholesky(m)
            err = np.linalg.norm(f.reconstruct() - m) / np.linalg.norm(m)
            assert err < 1e-8
            assert np.all(np.diag(f.lower) > 0)


class TestSpdSolve:
    def test_identity(self):
        f = cholesky(np.eye(3))
        assert np.array_equal(spd_solve(f, np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])

    def test_diagonal(self):
        f = cholesky(np.array([[4.0, 0.0], [0.0, 9.0]]))
        np.testing.assert_allclose(spd_solve(f, np.array([4.0, 9.0])), [1.0, 1.0])

    def test_matches_naive_inverse(self):
        rng = np.random.default_rng(2)
        m = random_spd(rng, 8)
        b = rng.standard_normal(8)
        x = spd_solve(cholesky(m), b)
        expected = naive_inverse(m) @ b
        np.testing.assert_allclose(x, expected, rtol=1e-8, atol=1e-10)

    def test_residual(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            m = random_spd(rng, 6)
            b = rng.standard_normal(6)
            x = spd_solve(cholesky(m), b)
            assert np.linalg.norm(m @ x - b) / np.linalg.norm(b) < 1e-8

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            spd_solve(cholesky(np.eye(3)), np.ones(4))


class TestQuadraticForm:
    def test_zero_vector(self):
        f = cholesky(np.eye(4))
        assert quadratic_form(f, np.zeros(4)) == 0.0

    def test_identity(self):
        f = cholesky(np.eye(2))
        assert quadratic_form(f, np.array([3.0, 4.0])) == pytest.approx(25.0, abs=1e-12)

    def test_matches_naive_inverse(self):
        rng = np.random.default_rng(4)
        m = random_spd(rng, 8)
        d = rng.standard_normal(8)
        q = quadratic_form(cholesky(m), d)
        expected = d @ naive_inverse(m) @ d
        assert abs(q - expected) / abs(expected) < 1e-8

    def test_nonnegative(self):
        rng = np.random.default_rng(5)
        f = cholesky(random_spd(rng, 5))
        for _ in range(50):
            assert quadratic_form(f, rng.standard_normal(5)) >= 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            quadratic_form(cholesky(np.eye(3)), np.ones(2))


class TestRegularize:
    def test_adds_trace_scaled_ridge(self):
        m = np.diag([1.0, 3.0])
        out = regularize_spd(m)
        lam = 1e-6 * 4.0 / 2
        np.testing.assert_allclose(out, m + lam * np.eye(2))

    def test_zero_matrix_gets_floor(self):
        out = regularize_spd(np.zeros((3, 3)))
        f = cholesky(out)
        assert np.all(np.diag(f.lower) > 0)


class TestInputGradientCheck:
    def test_quadratic(self):
        def fn(x):
            return float(x @ x), 2.0 * x

        assert input_gradient_check(fn, np.array([1.0, 2.0]), 1e-5) < 1e-6

    def test_linear(self):
        w = np.array([0.3, -1.2, 4.0])

        def fn(x):
            return float(w @ x), w.copy()

        assert input_gradient_check(fn, np.array([1.0, 2.0, -0.5]), 1e-5) < 1e-8

    def test_trained_mlp_score(self, small_model, small_data):
        in_set, _ = small_data
        img = in_set.images[3]

        def fn(x):
            def downstream(z, p):
                return float(z @ z), 2.0 * z, None

            value, grad = model.score_and_input_gradient(
                small_model, x.reshape(img.shape), downstream
            )
            return value, grad.reshape(-1)

        assert input_gradient_check(fn, img.reshape(-1), 1e-4) < 1e-3

    def test_non_finite(self):
        def fn(x):
            if x[0] > 1.0:
                return float("nan"), np.zeros_like(x)
            return float(x[0]), np.array([1.0, 0.0])

        with pytest.raises(NonFiniteValue):
            input_gradient_check(fn, np.array([1.0 - 1e-5, 0.0]), 1e-4)

    def test_bad_h(self):
        with pytest.raises(ValueError):
            input_gradient_check(lambda x: (0.0, np.zeros_like(x)), np.ones(2), 0.0)


def test_spd_factor_shares_safely():
    rng = np.random.default_rng(6)
    m = random_spd(rng, 4)
    f = cholesky(m)
    assert isinstance(f, SpdFactor)
    assert f.dim == 4
