import numpy as np
import pytest

from corrflow.correlation import (
    CovarianceModel,
    build_partition,
    cholesky_factor,
    estimate_covariance,
    sample_noise,
    shrink,
)
from corrflow.errors import ConfigError, EstimationError, FactorizationError


def random_spd(rng, n, strength=0.6):
    a = rng.normal(size=(n, n))
    base = a @ a.T / n
    return strength * base + (1 - strength) * np.eye(n)


def test_single_chunk_outer_product():
    rng = np.random.default_rng(0)
    chunk = rng.normal(size=(2, 3))
    vec = chunk.reshape(-1)
    sigma = estimate_covariance(chunk[None])
    assert np.allclose(sigma, np.outer(vec, vec), atol=1e-15)


def test_estimator_monte_carlo():
    # 50k draws from a known 6x6 covariance recover it within 0.05 max-abs.
    rng = np.random.default_rng(1)
    target = random_spd(rng, 6)
    L = np.linalg.cholesky(target)
    draws = rng.standard_normal((50_000, 6)) @ L.T
    sigma = estimate_covariance(draws.reshape(-1, 2, 3))
    assert np.max(np.abs(sigma - target)) < 0.05


def test_streamed_estimate_matches():
    rng = np.random.default_rng(2)
    chunks = rng.normal(size=(90, 2, 3))
    whole = estimate_covariance(chunks)
    streamed = estimate_covariance(iter([chunks[:30], chunks[30:50], chunks[50:]]))
    assert np.allclose(whole, streamed, atol=1e-12)
    with pytest.raises(EstimationError):
        estimate_covariance(iter([]))


def test_shrink_endpoints():
    rng = np.random.default_rng(3)
    sigma = random_spd(rng, 8)
    assert np.allclose(shrink(sigma, 0.0), np.eye(8))
    assert np.allclose(shrink(sigma, 1.0), sigma)
    mid = shrink(sigma, 0.5)
    assert np.allclose(mid, 0.5 * sigma + 0.5 * np.eye(8))
    with pytest.raises(ConfigError):
        shrink(sigma, 1.2)


def test_shrink_eigenvalue_floor():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = int(rng.integers(2, 12))
        a = rng.normal(size=(n, n))
        psd = a @ a.T  # possibly ill-conditioned
        beta = float(rng.uniform(0, 1))
        w = np.linalg.eigvalsh(shrink(psd, beta))
        assert w.min() >= (1 - beta) - 1e-10


def test_cholesky_closed_form():
    assert np.allclose(cholesky_factor(np.eye(4)), np.eye(4))
    rho = 0.6
    L = cholesky_factor(np.array([[1.0, rho], [rho, 1.0]]))
    assert np.allclose(L, np.array([[1.0, 0.0], [0.6, 0.8]]), atol=1e-15)


def test_cholesky_failure_names_pivot():
    bad = np.array([[1.0, 2.0], [2.0, 1.0]])  # second leading minor negative
    with pytest.raises(FactorizationError) as exc:
        cholesky_factor(bad)
    assert exc.value.pivot == 2
    assert "order 2" in str(exc.value)


def test_fit_reconstruction():
    rng = np.random.default_rng(5)
    chunks = rng.normal(size=(500, 3, 4))
    model = CovarianceModel(beta=0.5).fit(chunks)
    assert model.shape_ == (3, 4)
    assert np.max(np.abs(model.sigma_ - model.sigma_.T)) < 1e-10
    recon = model.chol_ @ model.chol_.T
    assert np.max(np.abs(recon - model.sigma_reg_)) < 1e-8


def test_sample_noise_determinism_and_shape():
    rng = np.random.default_rng(6)
    model = CovarianceModel(beta=0.5).fit(rng.normal(size=(200, 2, 3)))
    a = sample_noise(model, np.random.default_rng(42))
    b = sample_noise(model, np.random.default_rng(42))
    assert a.shape == (2, 3)
    assert np.array_equal(a, b)
    batch = sample_noise(model, np.random.default_rng(1), size=7)
    assert batch.shape == (7, 2, 3)


def test_sample_noise_identity_covariance():
    model = CovarianceModel.from_matrix(np.eye(6), shape=(2, 3), beta=0.0)
    draws = model.sample(np.random.default_rng(7), size=20_000).reshape(-1, 6)
    emp = draws.T @ draws / draws.shape[0]
    assert np.max(np.abs(emp - np.eye(6))) < 0.05
    assert np.max(np.abs(draws.mean(axis=0))) < 0.02


def test_partition_identity_and_toy():
    model = CovarianceModel.from_matrix(np.eye(6), shape=(3, 2), beta=1.0)
    part = build_partition(model, 1)
    assert np.array_equal(part.observed, [0, 1])
    assert np.array_equal(part.free, [2, 3, 4, 5])
    assert np.allclose(part.m_corr, 0.0)

    rho = 0.35
    toy = CovarianceModel.from_matrix(np.array([[1.0, rho], [rho, 1.0]]), shape=(2, 1), beta=1.0)
    part = toy.partition(1)
    assert part.m_corr.shape == (1, 1)
    assert abs(part.m_corr[0, 0] - rho) < 1e-12


def test_partition_default_sizes():
    layout_hd = 30 * 23
    model = CovarianceModel.from_matrix(np.eye(layout_hd), shape=(30, 23), beta=0.5)
    part = model.partition(4)
    assert part.observed.size == 92
    assert part.free.size == 598
    with pytest.raises(ConfigError):
        model.partition(0)
    with pytest.raises(ConfigError):
        model.partition(30)


def test_m_corr_definition_invariant():
    rng = np.random.default_rng(8)
    sigma = random_spd(rng, 12)
    model = CovarianceModel.from_matrix(sigma, shape=(4, 3), beta=0.5)
    part = model.partition(2)
    s = model.sigma_reg_
    lhs = part.m_corr @ s[np.ix_(part.observed, part.observed)]
    rhs = s[np.ix_(part.free, part.observed)]
    assert np.max(np.abs(lhs - rhs)) < 1e-6


def test_m_corr_matches_regression():
    # m_corr is the least-squares slope of free on observed coordinates.
    rng = np.random.default_rng(9)
    sigma = random_spd(rng, 8)
    model = CovarianceModel.from_matrix(sigma, shape=(4, 2), beta=0.5)
    part = model.partition(1)
    draws = model.sample(rng, size=50_000).reshape(-1, 8)
    obs, free = draws[:, part.observed], draws[:, part.free]
    slope, *_ = np.linalg.lstsq(obs, free, rcond=None)
    assert np.max(np.abs(slope.T - part.m_corr)) < 0.05
