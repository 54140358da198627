import numpy as np
import pytest

from corrflow.correlation import CovarianceModel
from corrflow.errors import ConfigError, NumericalError
from corrflow.flow import (
    IdentityNoise,
    denoise,
    flow_loss,
    flow_loss_grad,
    interpolate,
    sample_time,
    velocity_target,
)
from corrflow.models import GaussianOracleModel, ParametricModel, oracle_velocity, time_features


class ConstantModel:
    def __init__(self, v):
        self.v = np.asarray(v, dtype=np.float64)

    def predict(self, x, t, context=None):
        flat = self.v.reshape(-1)
        if np.asarray(x).ndim == 2:
            return np.tile(flat, (np.asarray(x).shape[0], 1))
        return self.v


class ZeroModel:
    def predict(self, x, t, context=None):
        return np.zeros_like(np.asarray(x, dtype=np.float64))


def test_interpolate_endpoints():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 2))
    eps = rng.normal(size=(3, 2))
    assert np.array_equal(interpolate(a, eps, 0.0), a)
    assert np.array_equal(interpolate(a, eps, 1.0), eps)
    assert np.allclose(interpolate(np.zeros((3, 2)), np.full((3, 2), 2.0), 0.5), 1.0)
    with pytest.raises(ConfigError):
        interpolate(a, np.zeros((2, 2)), 0.5)


def test_velocity_target_is_time_derivative():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 3))
    eps = rng.normal(size=(4, 3))
    u = velocity_target(a, eps)
    h = 1e-6
    for t in (0.2, 0.5, 0.9):
        fd = (interpolate(a, eps, t + h) - interpolate(a, eps, t - h)) / (2 * h)
        rel = np.max(np.abs(fd - u)) / max(np.max(np.abs(u)), 1e-12)
        assert rel < 1e-4
    assert np.allclose(velocity_target(a, a.copy()), 0.0)
    assert np.array_equal(velocity_target(np.zeros_like(eps), eps), eps)


def test_sample_time_distribution():
    rng = np.random.default_rng(2)
    t = sample_time(rng, size=1_000_000)
    assert t.min() > 0.0 and t.max() <= 1.0
    assert abs(t.mean() - 0.6) < 0.005
    assert abs(np.mean(t <= 0.5) - 0.5**1.5) < 0.01


def test_flow_loss_perfect_and_zero_models():
    hd_shape = (3, 4)
    noise = IdentityNoise(hd_shape)
    rng = np.random.default_rng(3)

    class PerfectModel:
        """Recovers u = eps - a from x_t and t using the known pair."""

        def __init__(self, a):
            self.a = a.reshape(-1)

        def predict(self, x, t, context=None):
            x = np.atleast_2d(np.asarray(x, dtype=np.float64))
            t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
            eps = np.where(t > 0, (x - (1 - t) * self.a) / np.where(t > 0, t, 1.0), x)
            return eps - self.a

    a = rng.normal(size=hd_shape)
    loss = flow_loss(PerfectModel(a), a, None, noise, n_samples=10, rng=np.random.default_rng(4))
    assert loss < 1e-20

    # v = 0 on unit-variance data and noise: E||eps - a||^2 / HD = 2.
    chunks = np.random.default_rng(5).standard_normal((2000, 3, 4))
    total = 0.0
    rng_eval = np.random.default_rng(6)
    for chunk in chunks[:500]:
        total += flow_loss(ZeroModel(), chunk, None, noise, n_samples=4, rng=rng_eval)
    assert abs(total / 500 - 2.0) < 0.05


def test_flow_loss_matches_manual_average():
    # The estimator is the plain mean of per-sample losses (order-free).
    shape = (2, 3)
    noise = IdentityNoise(shape)
    model = ZeroModel()
    a = np.random.default_rng(7).normal(size=shape)
    seed = 123
    loss = flow_loss(model, a, None, noise, n_samples=6, rng=np.random.default_rng(seed))

    rng = np.random.default_rng(seed)
    t = sample_time(rng, size=(1, 6))
    eps = noise.sample(rng, size=6).reshape(1, 6, 2, 3)
    per_sample = [np.mean((eps[0, i] - a) ** 2) for i in range(6)]
    assert abs(loss - np.mean(per_sample)) < 1e-12
    assert abs(loss - np.mean(per_sample[::-1])) < 1e-12


def test_flow_loss_rejects_bad_n():
    noise = IdentityNoise((2, 2))
    with pytest.raises(ConfigError):
        flow_loss(ZeroModel(), np.zeros((2, 2)), None, noise, n_samples=0, rng=np.random.default_rng(0))


def grad_check_once(seed):
    rng = np.random.default_rng(seed)
    model = ParametricModel(flat_size=4, context_size=3, hidden=8, n_time_freq=2, rng=rng)
    assert model.n_params <= 500
    a = rng.normal(size=(2, 2))
    ctx = rng.normal(size=3)
    noise = IdentityNoise((2, 2))

    def loss_at(flat):
        model.set_flat_params(flat)
        # Fresh identically-seeded rng each call: frozen (t, eps) draws.
        return flow_loss(model, a, ctx, noise, n_samples=3, rng=np.random.default_rng(seed + 1))

    base = model.get_flat_params().copy()
    _, grads = flow_loss_grad(
        model, a, ctx, noise, n_samples=3, rng=np.random.default_rng(seed + 1)
    )
    ga = np.concatenate([grads[k].ravel() for k in model.PARAM_NAMES])
    gf = np.zeros_like(ga)
    h = 1e-5
    for i in range(base.size):
        up, down = base.copy(), base.copy()
        up[i] += h
        down[i] -= h
        gf[i] = (loss_at(up) - loss_at(down)) / (2 * h)
    model.set_flat_params(base)
    return np.max(np.abs(ga - gf)) / (np.max(np.abs(ga)) + np.max(np.abs(gf)))


def test_parametric_gradients_match_finite_differences():
    for seed in (10, 11, 12):
        assert grad_check_once(seed) < 1e-4


def test_denoise_constant_model_single_step():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(3, 2))
    eps = rng.normal(size=(3, 2))
    model = ConstantModel(velocity_target(a, eps))
    out = denoise(model, eps, steps=1)
    assert np.max(np.abs(out - a)) < 1e-12


def test_denoise_batch_and_determinism():
    rng = np.random.default_rng(9)
    m = rng.normal(size=6) * 0.5
    C = np.eye(6) * 0.7
    S = np.eye(6)
    oracle = GaussianOracleModel(m, C, S)
    eps = np.random.default_rng(10).standard_normal((5, 2, 3))
    out1 = denoise(oracle, eps, steps=20)
    out2 = denoise(oracle, eps, steps=20)
    assert out1.shape == (5, 2, 3)
    assert np.array_equal(out1, out2)


def test_denoise_nonfinite_names_step():
    class NanModel:
        def predict(self, x, t, context=None):
            return np.full_like(np.asarray(x, dtype=np.float64), np.nan)

    with pytest.raises(NumericalError, match="step 0"):
        denoise(NanModel(), np.zeros((2, 2)), steps=4)


def test_oracle_velocity_closed_forms():
    n = 4
    oracle = GaussianOracleModel(np.zeros(n), np.eye(n), np.eye(n))
    x = np.random.default_rng(11).normal(size=n)
    assert np.allclose(oracle_velocity(oracle, x, 1.0), x, atol=1e-12)

    rng = np.random.default_rng(12)
    m = rng.normal(size=n)
    a = rng.normal(size=(n, n))
    C = a @ a.T / n + 0.5 * np.eye(n)
    oracle = GaussianOracleModel(m, C, np.eye(n))
    t = 0.37
    assert np.allclose(oracle_velocity(oracle, (1 - t) * m, t), -m, atol=1e-12)


def test_oracle_denoise_hits_target_distribution():
    rng = np.random.default_rng(13)
    m = rng.normal(size=6) * 0.8
    a = rng.normal(size=(6, 6))
    C = 0.6 * (a @ a.T / 6) + 0.4 * np.eye(6)
    model = CovarianceModel.from_matrix(C, shape=(2, 3), beta=0.5)
    S = model.sigma_reg_
    oracle = GaussianOracleModel(m, C, S)

    eps = model.sample(np.random.default_rng(14), size=5000)
    out = denoise(oracle, eps, steps=200).reshape(5000, 6)
    emp_mean = out.mean(axis=0)
    centered = out - emp_mean
    emp_cov = centered.T @ centered / out.shape[0]
    assert np.max(np.abs(emp_mean - m)) < 0.08
    assert np.max(np.abs(emp_cov - C)) < 0.12


def test_time_features_shape():
    tf = time_features(np.array([0.1, 0.9]), n_freq=8)
    assert tf.shape == (2, 16)
    assert np.all(np.isfinite(tf))
