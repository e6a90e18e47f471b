from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from failmode.catalog import UnknownConceptError
from failmode.gp import (
    JITTER_MAX,
    GPFitError,
    KernelSpec,
    encode,
    encode_many,
    fit,
    jitter_cholesky,
    posterior,
    sample_posterior,
)


def blr_posterior(X, y, Xs, noise):
    """Dense Bayesian linear regression with a unit Gaussian weight prior."""
    d = X.shape[1]
    A = X.T @ X / noise + np.eye(d)
    Ainv = np.linalg.inv(A)
    mean = Xs @ Ainv @ X.T @ y / noise
    cov = Xs @ Ainv @ Xs.T
    return mean, cov


def test_single_point_by_hand():
    model = fit(np.array([[1.0]]), np.array([0.6]), KernelSpec("dot", 0.05))
    mean, cov = posterior(model, np.array([[1.0]]))
    assert mean[0] == pytest.approx(0.6 / 1.05, abs=1e-12)
    assert cov[0, 0] == pytest.approx(0.05 / 1.05, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 8), d=st.integers(1, 8), seed=st.integers(0, 2**32 - 1), noise=st.sampled_from([0.01, 0.05, 0.1]))
def test_dot_kernel_matches_linear_regression(n, d, seed, noise):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 2, size=(n, d)).astype(float)
    y = rng.random(n)
    Xs = rng.integers(0, 2, size=(4, d)).astype(float)
    mean, cov = posterior(fit(X, y, KernelSpec("dot", noise)), Xs)
    ref_mean, ref_cov = blr_posterior(X, y, Xs, noise)
    np.testing.assert_allclose(mean, ref_mean, atol=1e-8)
    np.testing.assert_allclose(cov, ref_cov, atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), family=st.sampled_from(["dot", "rbf"]))
def test_posterior_is_row_permutation_invariant(seed, family):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 2, size=(6, 5)).astype(float)
    y = rng.random(6)
    Xs = rng.integers(0, 2, size=(3, 5)).astype(float)
    perm = rng.permutation(6)
    m1, c1 = posterior(fit(X, y, KernelSpec(family)), Xs)
    m2, c2 = posterior(fit(X[perm], y[perm], KernelSpec(family)), Xs)
    np.testing.assert_allclose(m1, m2, atol=1e-10)
    np.testing.assert_allclose(c1, c2, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), family=st.sampled_from(["dot", "rbf"]))
def test_posterior_covariance_is_symmetric_psd_diagonal(seed, family):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 2, size=(10, 6)).astype(float)
    _, cov = posterior(fit(X, rng.random(10), KernelSpec(family, 0.01)), X)
    np.testing.assert_array_equal(cov, cov.T)
    assert (np.diag(cov) >= 0).all()


def test_empty_model_returns_prior():
    model = fit(np.zeros((0, 3)), np.zeros(0))
    Xs = np.eye(3)
    mean, cov = posterior(model, Xs)
    np.testing.assert_array_equal(mean, 0)
    np.testing.assert_array_equal(cov, np.eye(3))


def test_jitter_rescues_singular_matrix():
    L, jitter = jitter_cholesky(np.ones((3, 3)))
    assert 0 < jitter <= JITTER_MAX
    np.testing.assert_allclose(L @ L.T, np.ones((3, 3)) + jitter * np.eye(3), atol=1e-12)


def test_jitter_gives_up_on_indefinite_matrix():
    with pytest.raises(GPFitError):
        jitter_cholesky(-np.eye(2))


def test_zero_noise_contradiction_is_explicit():
    X = np.array([[1.0, 0.0], [1.0, 0.0]])
    with pytest.raises(GPFitError, match="duplicate inputs"):
        fit(X, np.array([0.2, 0.8]), KernelSpec("dot", 0.0))
    fit(X, np.array([0.5, 0.5]), KernelSpec("dot", 0.0))  # consistent duplicates are fine


def test_noise_grid_picks_best_marginal_likelihood():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 2, size=(20, 4)).astype(float)
    y = rng.random(20)
    grid = (0.01, 0.05, 0.1)
    best = fit(X, y, noise_grid=grid)
    lmls = {s: fit(X, y, KernelSpec("dot", s)).log_marginal_likelihood() for s in grid}
    assert best.kernel.noise_variance == max(lmls, key=lmls.get)


def test_rbf_kernel_values():
    k = KernelSpec("rbf", lengthscale=2.0)
    A = np.array([[0.0, 0.0], [1.0, 1.0]])
    K = k(A, A)
    np.testing.assert_allclose(np.diag(K), 1.0)
    assert K[0, 1] == pytest.approx(np.exp(-0.5 * 2 / 4))


@pytest.mark.parametrize("kwargs", [{"noise_variance": -1}, {"lengthscale": 0}, {"family": "matern"}])
def test_invalid_kernel_spec(kwargs):
    with pytest.raises(ValueError):
        KernelSpec(**kwargs)


def test_encoding(synthetic_catalog):
    x = encode({"ent_b", "mod_z"}, synthetic_catalog)
    assert x.shape == (15,) and x.sum() == 2
    assert x[synthetic_catalog.ids.index("ent_b")] == 1
    assert encode_many([], synthetic_catalog).shape == (0, 15)
    with pytest.raises(UnknownConceptError):
        encode({"nope"}, synthetic_catalog)


def test_dimension_mismatch():
    model = fit(np.eye(3), np.ones(3))
    with pytest.raises(ValueError, match="dimension"):
        posterior(model, np.ones((1, 4)))


def test_sampling_is_seeded_and_centered():
    rng = np.random.default_rng(1)
    X = rng.integers(0, 2, size=(8, 5)).astype(float)
    model = fit(X, rng.random(8))
    Xs = rng.integers(0, 2, size=(4, 5)).astype(float)
    a = sample_posterior(model, Xs, np.random.default_rng(7))
    b = sample_posterior(model, Xs, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)
    draws = np.array([sample_posterior(model, Xs, np.random.default_rng(s)) for s in range(3000)])
    mean, _ = posterior(model, Xs)
    np.testing.assert_allclose(draws.mean(0), mean, atol=0.05)


def test_sampling_degenerate_covariance_returns_mean():
    model = fit(np.zeros((0, 2)), np.zeros(0))
    draw = sample_posterior(model, np.zeros((3, 2)), np.random.default_rng(0))
    np.testing.assert_array_equal(draw, 0)
