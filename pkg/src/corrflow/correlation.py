"""Flattened action-chunk covariance: estimation, shrinkage, sampling, inpainting algebra.

Chunks are flattened row-major to HD-vectors (timestep-major), so index
i*D + d addresses timestep i, dimension d. The estimator is uncentered: it
assumes chunks were normalized first, which already centers every cell.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lapack
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigError, EstimationError, FactorizationError, LayoutError


def estimate_covariance(chunks) -> np.ndarray:
    """Uncentered covariance (1/N) sum vec(a) vec(a)^T over normalized chunks.

    Args:
        chunks: (N, H, D) array, or an iterable of such blocks for streaming.
            Blocks are reduced into one HD x HD float64 accumulator, so memory
            stays bounded by HD^2 regardless of dataset size.
    """
    if isinstance(chunks, np.ndarray):
        chunks = [chunks]
    acc = None
    n = 0
    for block in chunks:
        arr = np.asarray(block, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise LayoutError(f"chunk block must be (n, H, D), got shape {arr.shape}")
        flat = arr.reshape(arr.shape[0], -1)
        if acc is None:
            acc = np.zeros((flat.shape[1], flat.shape[1]))
        elif flat.shape[1] != acc.shape[0]:
            raise LayoutError("inconsistent chunk shapes across blocks")
        acc += flat.T @ flat
        n += flat.shape[0]
    if acc is None or n == 0:
        raise EstimationError("cannot estimate covariance from zero chunks")
    sigma = acc / n
    return (sigma + sigma.T) / 2.0


def shrink(sigma: np.ndarray, beta: float) -> np.ndarray:
    """Convex blend beta * sigma + (1 - beta) * I."""
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"shrinkage beta must lie in [0, 1], got {beta}")
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise LayoutError(f"covariance must be square, got shape {sigma.shape}")
    return beta * sigma + (1.0 - beta) * np.eye(sigma.shape[0])


def cholesky_factor(sigma_reg: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L L^T = sigma_reg.

    Raises:
        FactorizationError: non-positive-definite input; the message names the
            failing pivot (1-based leading-minor order from LAPACK).
    """
    a = np.asarray(sigma_reg, dtype=np.float64)
    c, info = lapack.dpotrf(a, lower=1, overwrite_a=0)
    if info > 0:
        raise FactorizationError(
            f"covariance is not positive definite: leading minor of order {info} failed",
            pivot=int(info),
        )
    if info < 0:
        raise FactorizationError(f"invalid input to Cholesky (argument {-info})")
    return np.tril(c)


@dataclass(frozen=True)
class InpaintPartition:
    """Index split of the flattened chunk plus the conditional-mean slope.

    observed covers the first k timesteps across all D dims; free is the rest.
    m_corr maps an observed-coordinate residual to the conditional-mean shift
    of the free coordinates: m_corr = Sigma_UO Sigma_OO^{-1}.
    """

    k: int
    observed: np.ndarray
    free: np.ndarray
    m_corr: np.ndarray


class CovarianceModel(BaseEstimator):
    """Fitted chunk covariance with shrinkage, sampling, and inpainting support.

    Fitted attributes: sigma_ (raw estimate), sigma_reg_ (after shrinkage),
    chol_ (lower Cholesky factor of sigma_reg_), shape_ = (H, D).
    """

    def __init__(self, beta: float = 0.5):
        self.beta = beta

    def fit(self, X, y=None):
        """Fit from (N, H, D) normalized chunks or an iterable of such blocks."""
        if isinstance(X, np.ndarray):
            shape = X.shape[-2:]
            sigma = estimate_covariance(X)
        else:
            blocks = iter(X)
            try:
                first = np.asarray(next(blocks), dtype=np.float64)
            except StopIteration:
                raise EstimationError("cannot estimate covariance from zero chunks") from None
            shape = first.shape[-2:]

            def chain():
                yield first
                yield from blocks

            sigma = estimate_covariance(chain())
        self.shape_ = (int(shape[0]), int(shape[1]))
        self.sigma_ = sigma
        self.sigma_reg_ = shrink(sigma, self.beta)
        self.chol_ = cholesky_factor(self.sigma_reg_)
        self._partitions: dict[int, InpaintPartition] = {}
        return self

    @classmethod
    def from_matrix(cls, sigma: np.ndarray, shape: tuple[int, int], beta: float = 0.5) -> "CovarianceModel":
        """Build directly from a raw covariance matrix (tests, checkpoints)."""
        model = cls(beta=beta)
        sigma = np.asarray(sigma, dtype=np.float64)
        if sigma.shape != (shape[0] * shape[1],) * 2:
            raise LayoutError(f"covariance shape {sigma.shape} does not match H*D={shape[0] * shape[1]}")
        model.shape_ = (int(shape[0]), int(shape[1]))
        model.sigma_ = sigma
        model.sigma_reg_ = shrink(sigma, beta)
        model.chol_ = cholesky_factor(model.sigma_reg_)
        model._partitions = {}
        return model

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        """Draw eps = L z with z ~ N(0, I); returns (H, D) or (size, H, D)."""
        check_is_fitted(self, "chol_")
        H, D = self.shape_
        n = 1 if size is None else int(size)
        z = rng.standard_normal((n, H * D))
        eps = (z @ self.chol_.T).reshape(n, H, D)
        return eps[0] if size is None else eps

    def partition(self, k_observed_steps: int) -> InpaintPartition:
        """Observed/free split after k observed timesteps, with cached m_corr.

        m_corr is computed by triangular solves against the Cholesky factor of
        Sigma_OO; the matrix is never inverted explicitly.
        """
        check_is_fitted(self, "chol_")
        H, D = self.shape_
        k = int(k_observed_steps)
        if not 1 <= k < H:
            raise ConfigError(f"k_observed_steps must lie in [1, {H - 1}], got {k}")
        if k in self._partitions:
            return self._partitions[k]
        hd = H * D
        observed = np.arange(k * D)
        free = np.arange(k * D, hd)
        sigma = self.sigma_reg_
        sigma_oo = sigma[np.ix_(observed, observed)]
        sigma_ou = sigma[np.ix_(observed, free)]
        try:
            factor = cho_factor(sigma_oo, lower=True)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - blocked by beta < 1
            raise FactorizationError(f"observed block not positive definite: {exc}") from exc
        m_corr = cho_solve(factor, sigma_ou).T
        part = InpaintPartition(k=k, observed=observed, free=free, m_corr=m_corr)
        self._partitions[k] = part
        return part


def sample_noise(model: CovarianceModel, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    return model.sample(rng, size=size)


def build_partition(model: CovarianceModel, k_observed_steps: int) -> InpaintPartition:
    return model.partition(k_observed_steps)
