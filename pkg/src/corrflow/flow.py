"""Flow-matching math: interpolation, targets, time sampling, loss, Euler denoising.

Convention: t=1 is pure noise, t=0 is the target chunk. Denoising integrates
x <- x - dt * v(x, t) from t=1 down to 0 with uniform steps.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, NumericalError
from .models import _flatten_x, _restore_x

TIME_ALPHA = 1.5  # Beta(alpha, 1) time density, mass toward the noise end


class IdentityNoise:
    """Unit-Gaussian noise source with the same sample interface as CovarianceModel."""

    def __init__(self, shape: tuple[int, int]):
        self.shape_ = (int(shape[0]), int(shape[1]))

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        H, D = self.shape_
        n = 1 if size is None else int(size)
        eps = rng.standard_normal((n, H, D))
        return eps[0] if size is None else eps


def interpolate(a: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    """x_t = t * eps + (1 - t) * a; t may broadcast over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if a.shape != eps.shape:
        raise ConfigError(f"shape mismatch: a {a.shape} vs eps {eps.shape}")
    t = np.asarray(t, dtype=np.float64)
    return t * eps + (1.0 - t) * a


def velocity_target(a: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Training target u = eps - a (the exact t-derivative of the interpolant)."""
    a = np.asarray(a, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if a.shape != eps.shape:
        raise ConfigError(f"shape mismatch: a {a.shape} vs eps {eps.shape}")
    return eps - a


def sample_time(rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray | float:
    """Draw flow times from Beta(1.5, 1) by inverse CDF u**(1/1.5)."""
    u = rng.random(size)
    t = u ** (1.0 / TIME_ALPHA)
    return t


def flow_loss(
    model,
    a: np.ndarray,
    context,
    noise,
    n_samples: int = 15,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Monte Carlo flow-matching loss for one chunk.

    Draws n_samples (t, eps) pairs, evaluates the model at each interpolant,
    and averages the per-sample mean squared velocity error. The context is
    taken as given: it is computed once per example, not per sample.
    """
    loss, _ = _flow_loss_core(model, a[None], None if context is None else np.asarray(context)[None], noise, n_samples, rng, want_grads=False)
    return loss


def flow_loss_grad(model, a, context, noise, n_samples: int = 15, rng=None):
    """Loss plus parameter gradients, batched over the leading axis of a."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
        if context is not None:
            context = np.asarray(context)[None]
    return _flow_loss_core(model, a, context, noise, n_samples, rng, want_grads=True)


def _flow_loss_core(model, chunks, contexts, noise, n_samples, rng, want_grads):
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if rng is None:
        raise ConfigError("flow loss needs an explicit rng for reproducibility")
    b, H, D = chunks.shape
    hd = H * D
    n = int(n_samples)

    t = np.asarray(sample_time(rng, size=(b, n)))
    eps = noise.sample(rng, size=b * n).reshape(b, n, H, D)
    a_rep = chunks[:, None]
    x_t = interpolate(np.broadcast_to(a_rep, eps.shape), eps, t[..., None, None])
    u = velocity_target(np.broadcast_to(a_rep, eps.shape), eps)

    x_flat = x_t.reshape(b * n, hd)
    t_flat = t.reshape(b * n)
    ctx_flat = None
    if contexts is not None:
        ctx = np.asarray(contexts, dtype=np.float64)
        ctx_flat = np.repeat(ctx, n, axis=0)

    if want_grads:
        v, cache = model.predict_with_cache(x_flat, t_flat, ctx_flat)
    else:
        v = model.predict(x_flat, t_flat, ctx_flat)
    diff = v.reshape(b, n, hd) - u.reshape(b, n, hd)
    loss = float(np.mean(diff * diff))
    if not want_grads:
        return loss, None
    # d loss / d v for mean over (b, n, hd)
    dv = (2.0 / (b * n * hd)) * diff.reshape(b * n, hd)
    grads = model.backprop(cache, dv)
    return loss, grads


def denoise(
    model,
    eps_start: np.ndarray,
    context=None,
    steps: int = 10,
    post_step: Optional[Callable[[np.ndarray, int, float], np.ndarray]] = None,
) -> np.ndarray:
    """Euler-integrate the velocity field from t=1 to t=0.

    Args:
        eps_start: starting noise, (H, D) or batched (..., H, D).
        steps: uniform Euler steps; dt = 1/steps.
        post_step: optional hook applied to the flat state after each update,
            called as post_step(x_flat, step_index, t_after). The inpainting
            path uses it; leaving it None is the plain integrator, and a hook
            that returns its input unchanged is bit-identical to None.

    Raises:
        NumericalError: non-finite state, naming the offending step.
    """
    steps = int(steps)
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    arr = np.asarray(eps_start, dtype=np.float64)
    flat_size = arr.shape[-2] * arr.shape[-1]
    x, how = _flatten_x(arr, flat_size)
    x = x.copy()
    dt = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i * dt
        v, _ = _as_flat_prediction(model, x, t, context, flat_size)
        x = x - dt * v
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite state after denoising step {i} (t={t:.4f})")
        if post_step is not None:
            t_after = 1.0 - (i + 1) * dt
            x = post_step(x, i, t_after)
    return _restore_x(x, how)


def _as_flat_prediction(model, x_flat, t, context, flat_size):
    v = model.predict(x_flat, t, context)
    v = np.asarray(v, dtype=np.float64).reshape(x_flat.shape[0], flat_size)
    return v, None
