from dataclasses import replace

import numpy as np
import pytest

from core.errors import DimensionError, DomainError, SingularGradientError
from core.gradcheck import features_with_spectrum, numerical_gradient, relative_error, separated_eigenvalues
from core.linalg import mat_inv_sqrt, mat_sqrt
from core.metalayer import (
    build_k,
    covariance,
    default_eps,
    meta_backward,
    meta_backward_p,
    meta_forward,
    two_step_covariance,
)
from models.data_classes import MetaMode, Solver, SpectralFactorization


def whitened_features(rng, d, n):
    """Features whose covariance is exactly the identity."""
    raw = rng.standard_normal((d, n))
    P, _ = covariance(raw)
    return mat_inv_sqrt(P) @ (raw - raw.mean(axis=1, keepdims=True))


def meta_fd_error(rng, dim, mode, eps, solver=Solver.SVD, ns_iters=10):
    X = features_with_spectrum(rng, separated_eigenvalues(rng, dim), max(2 * dim, 8))
    G = rng.standard_normal((dim, dim))

    def loss(features):
        Y, _ = meta_forward(features, mode, eps, solver, ns_iters)
        return float(np.sum(G * Y))

    _, cache = meta_forward(X, mode, eps, solver, ns_iters)
    return relative_error(meta_backward(cache, G), numerical_gradient(loss, X))


# covariance

def test_covariance_of_constant_columns_is_zero():
    X = np.tile([[1.5], [-2.0], [0.25]], (1, 6))
    P, _ = covariance(X)
    np.testing.assert_allclose(P, np.zeros((3, 3)), atol=1e-14)


def test_covariance_hand_example():
    P, J = covariance([[1.0, -1.0], [0.0, 0.0]])
    np.testing.assert_allclose(J, [[0.25, -0.25], [-0.25, 0.25]])
    np.testing.assert_allclose(P, [[1.0, 0.0], [0.0, 0.0]])


def test_covariance_matches_numpy_and_is_psd(rng):
    X = rng.standard_normal((5, 30))
    P, _ = covariance(X)
    np.testing.assert_allclose(P, np.cov(X, bias=True), atol=1e-12)
    lambdas = np.linalg.eigvalsh(P)
    assert lambdas[0] >= -1e-10 * lambdas[-1]


def test_covariance_needs_two_samples():
    with pytest.raises(DomainError):
        covariance(np.ones((3, 1)))


# forward

def test_meta_forward_constructed_covariance(rng):
    X = np.diag([2.0, 3.0]) @ whitened_features(rng, 2, 12)
    Y, cache = meta_forward(X, MetaMode.SQRT, eps=0.0)
    np.testing.assert_allclose(cache.P, np.diag([4.0, 9.0]), atol=1e-12)
    np.testing.assert_allclose(Y, np.diag([2.0, 3.0]), atol=1e-12)


@pytest.mark.parametrize("mode", list(MetaMode))
@pytest.mark.parametrize("solver", list(Solver))
def test_meta_forward_identity_covariance(rng, mode, solver):
    Y, _ = meta_forward(whitened_features(rng, 3, 10), mode, eps=0.0, solver=solver, ns_iters=30)
    np.testing.assert_allclose(Y, np.eye(3), atol=1e-10)


def test_meta_forward_inverse_square_root_diagonal(rng):
    X = np.diag([2.0, 1.0]) @ whitened_features(rng, 2, 8)
    Y, _ = meta_forward(X, MetaMode.INV_SQRT, eps=0.0)
    np.testing.assert_allclose(Y, np.diag([0.5, 1.0]), atol=1e-12)


@pytest.mark.parametrize("solver", list(Solver))
def test_meta_forward_square_root_ignores_floor(rng, solver):
    X = np.diag([2.0, 3.0]) @ whitened_features(rng, 2, 12)
    Y, cache = meta_forward(X, MetaMode.SQRT, eps=1.0, solver=solver, ns_iters=30)
    assert cache.eps == 1.0
    np.testing.assert_allclose(Y, np.diag([2.0, 3.0]), atol=1e-10)
    inv, _ = meta_forward(X, MetaMode.INV_SQRT, eps=1.0, solver=solver, ns_iters=30)
    np.testing.assert_allclose(inv, np.diag([5.0 ** -0.5, 10.0 ** -0.5]), atol=1e-10)


def test_meta_backward_square_root_floors_only_the_derivative(rng):
    X = features_with_spectrum(rng, separated_eigenvalues(rng, 3), 10)
    G = rng.standard_normal((3, 3))
    _, exact = meta_forward(X, MetaMode.SQRT, eps=0.0)
    _, floored = meta_forward(X, MetaMode.SQRT, eps=1.0)
    U, lam = exact.factor.U, exact.factor.lambdas
    K = build_k(lam, 1e-12 * lam[0] ** 2).entries
    dU = (G + G.T) @ U * np.sqrt(lam)
    dlam = 0.5 * (lam + 1.0) ** -0.5 * np.diag(U.T @ G @ U)
    expected = U @ (K.T * (U.T @ dU) + np.diag(dlam)) @ U.T
    np.testing.assert_allclose(meta_backward_p(floored, G), expected, atol=1e-10)


def test_meta_forward_default_eps_is_relative(rng):
    X = rng.standard_normal((4, 20))
    Y, cache = meta_forward(X, MetaMode.SQRT)
    assert cache.eps == pytest.approx(1e-5 * np.trace(cache.P) / 4)
    assert cache.eps == default_eps(cache.P)
    lambdas = np.linalg.eigvalsh(cache.P)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(Y)), np.sqrt(np.maximum(lambdas, 0.0)), rtol=1e-10)


def test_meta_forward_inverse_square_root_needs_positive_floor():
    X = np.array([[1.0, -1.0, 2.0, -2.0], [0.0, 0.0, 0.0, 0.0]])
    with pytest.raises(DomainError):
        meta_forward(X, MetaMode.INV_SQRT, eps=0.0)
    with pytest.raises(DomainError):
        meta_forward(X, MetaMode.SQRT, eps=-1.0)


@pytest.mark.parametrize("mode", list(MetaMode))
def test_newton_schulz_forward_agrees_with_eigendecomposition(rng, mode):
    X = features_with_spectrum(rng, separated_eigenvalues(rng, 5), 20)
    exact, _ = meta_forward(X, mode, eps=1e-6)
    approx, cache = meta_forward(X, mode, eps=1e-6, solver=Solver.NEWTON_SCHULZ, ns_iters=30)
    assert cache.factor is None
    assert len(cache.ns_iterates) == 31
    assert np.linalg.norm(approx - exact) <= 1e-8 * np.linalg.norm(exact)


# K matrix

def test_build_k_examples():
    np.testing.assert_allclose(build_k([3.0, 1.0], 0.0).entries, [[0.0, 0.5], [-0.5, 0.0]])
    np.testing.assert_array_equal(build_k([1.0, 1.0], 1e-12).entries, np.zeros((2, 2)))
    K = build_k([2.0, 1.0, 0.0], 0.0).entries
    assert K[0, 2] == pytest.approx(0.5)
    assert K[0, 1] == pytest.approx(1.0)
    assert K[1, 2] == pytest.approx(1.0)
    np.testing.assert_allclose(K, -K.T)
    np.testing.assert_array_equal(np.diag(K), np.zeros(3))


def test_build_k_errors():
    with pytest.raises(SingularGradientError):
        build_k([2.0, 2.0, 1.0], 0.0)
    with pytest.raises(DomainError):
        build_k([2.0, 1.0], -1e-3)


def test_build_k_regularization_is_small_for_separated_spectrum():
    exact = build_k([3.0, 2.0, 1.0], 0.0).entries
    regularized = build_k([3.0, 2.0, 1.0], 1e-12).entries
    np.testing.assert_allclose(regularized, exact, rtol=1e-11)


# backward

@pytest.mark.parametrize("mode", list(MetaMode))
def test_meta_backward_zero_gradient(rng, mode):
    X = rng.standard_normal((3, 9))
    _, cache = meta_forward(X, mode, eps=1e-3)
    np.testing.assert_array_equal(meta_backward(cache, np.zeros((3, 3))), np.zeros((3, 9)))


@pytest.mark.parametrize("mode", list(MetaMode))
@pytest.mark.parametrize("solver", list(Solver))
def test_meta_backward_consumes_symmetric_part(rng, mode, solver):
    for _ in range(10):
        X = features_with_spectrum(rng, separated_eigenvalues(rng, 4), 12)
        G = rng.standard_normal((4, 4))
        _, cache = meta_forward(X, mode, eps=1e-6, solver=solver, ns_iters=30)
        dP = meta_backward_p(cache, G)
        sym = 0.5 * (dP + dP.T)
        np.testing.assert_allclose(sym, sym.T, atol=1e-12)
        dX = meta_backward(cache, G)
        scale = max(np.linalg.norm(dX), 1.0)
        assert np.linalg.norm(dX - 2.0 * sym @ X @ cache.J) <= 1e-10 * scale


def test_meta_backward_p_symmetric_part_is_the_covariance_gradient(rng):
    X = features_with_spectrum(rng, separated_eigenvalues(rng, 4), 12)
    G = rng.standard_normal((4, 4))
    _, cache = meta_forward(X, MetaMode.SQRT, eps=0.0)
    dP = meta_backward_p(cache, G)
    for _ in range(5):
        E = rng.standard_normal((4, 4))
        E = E + E.T
        h = 1e-5
        numeric = (np.sum(G * mat_sqrt(cache.P + h * E)) - np.sum(G * mat_sqrt(cache.P - h * E))) / (2 * h)
        assert np.sum(0.5 * (dP + dP.T) * E) == pytest.approx(numeric, rel=1e-5, abs=1e-8)


@pytest.mark.parametrize("mode,eps", [(MetaMode.SQRT, 0.0), (MetaMode.INV_SQRT, 1e-6)])
@pytest.mark.parametrize("dim", [2, 4, pytest.param(8, marks=pytest.mark.slow)])
def test_meta_backward_matches_finite_differences(mode, eps, dim):
    for seed in range(20):
        error = meta_fd_error(np.random.default_rng([seed, dim]), dim, mode, eps)
        assert error <= 1e-4, (seed, error)


@pytest.mark.parametrize("mode", list(MetaMode))
@pytest.mark.parametrize("dim", [2, 4])
def test_newton_schulz_backward_matches_finite_differences(mode, dim):
    for seed in range(5):
        error = meta_fd_error(np.random.default_rng([seed, dim]), dim, mode, 1e-6, Solver.NEWTON_SCHULZ)
        assert error <= 1e-4, (seed, error)


@pytest.mark.parametrize("mode", list(MetaMode))
def test_newton_schulz_backward_converges_to_eigen_backward(rng, mode):
    X = features_with_spectrum(rng, separated_eigenvalues(rng, 4), 12)
    G = rng.standard_normal((4, 4))
    _, eig_cache = meta_forward(X, mode, eps=1e-6)
    _, ns_cache = meta_forward(X, mode, eps=1e-6, solver=Solver.NEWTON_SCHULZ, ns_iters=40)
    exact = meta_backward(eig_cache, G)
    assert relative_error(meta_backward(ns_cache, G), exact) <= 1e-6


def test_meta_backward_rejects_wrong_shape(rng):
    _, cache = meta_forward(rng.standard_normal((3, 8)), MetaMode.SQRT)
    with pytest.raises(DimensionError):
        meta_backward(cache, np.zeros((2, 2)))


def test_meta_backward_with_zero_reg_on_repeated_spectrum(rng):
    _, cache = meta_forward(whitened_features(rng, 3, 10), MetaMode.SQRT, eps=0.0)
    cache = replace(cache, factor=SpectralFactorization(U=np.eye(3), lambdas=np.ones(3)))
    with pytest.raises(SingularGradientError):
        meta_backward(cache, np.eye(3), reg=0.0)
    assert np.all(np.isfinite(meta_backward_p(cache, np.eye(3))))


# two-step covariance

def test_two_step_covariance_examples(rng):
    W = rng.standard_normal((4, 4))
    G = rng.standard_normal((4, 4))
    Y = rng.standard_normal((4, 10))
    np.testing.assert_allclose(two_step_covariance(W, G, 0.0, Y), W @ Y @ Y.T @ W.T)
    np.testing.assert_allclose(two_step_covariance(W, W, 1.0, Y), np.zeros((4, 4)), atol=1e-12)


def test_two_step_covariance_expansion_identity(rng):
    for _ in range(100):
        d = int(rng.integers(2, 9))
        W, G = rng.standard_normal((d, d)), rng.standard_normal((d, d))
        Y = rng.standard_normal((d, int(rng.integers(2, 20))))
        eta = float(rng.uniform(0.0, 1.0))
        C = two_step_covariance(W, G, eta, Y)
        updated = W - eta * G
        np.testing.assert_allclose(C, updated @ Y @ Y.T @ updated.T, rtol=1e-10, atol=1e-10)


def test_two_step_covariance_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        two_step_covariance(np.eye(3), np.eye(2), 0.1, np.ones((3, 4)))
    with pytest.raises(DimensionError):
        two_step_covariance(np.eye(3), np.eye(3), 0.1, np.ones((2, 4)))
