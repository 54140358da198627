"""Action tensor layout, delta-action conversion, and per-timestamp normalization.

An action chunk is an (H, D) matrix: H future timesteps of a D-dimensional
action command. Position-type dimensions are re-expressed as offsets from the
current joint state ("delta actions"); velocity and gripper dimensions are
commands, not positions, and pass through unchanged. Normalization is
per-(timestep, dimension) except for the exempt dimensions, which get a single
global mean/std broadcast over the horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import EstimationError, LayoutError


@dataclass(frozen=True)
class ActionLayout:
    """Shape and dimension-role description of the action space.

    Args:
        horizon: number of timesteps per chunk (H).
        dim: action dimensionality (D).
        velocity_dims: indices of body-velocity dimensions.
        gripper_dims: indices of gripper dimensions.
        control_rate: control frequency in Hz.
    """

    horizon: int = 30
    dim: int = 23
    velocity_dims: tuple[int, ...] = (0, 1, 2)
    gripper_dims: tuple[int, ...] = (14, 22)
    control_rate: float = 30.0

    def __post_init__(self):
        if self.horizon < 2 or self.dim < 1:
            raise LayoutError(f"horizon >= 2 and dim >= 1 required, got H={self.horizon}, D={self.dim}")
        vel, grip = set(self.velocity_dims), set(self.gripper_dims)
        if vel & grip:
            raise LayoutError(f"velocity and gripper dims overlap: {sorted(vel & grip)}")
        for d in vel | grip:
            if not 0 <= d < self.dim:
                raise LayoutError(f"dimension index {d} outside [0, {self.dim})")

    @property
    def flat_size(self) -> int:
        return self.horizon * self.dim

    @property
    def delta_exempt_dims(self) -> tuple[int, ...]:
        """Dims passed through by to_delta: commands rather than positions."""
        return tuple(sorted(set(self.velocity_dims) | set(self.gripper_dims)))

    @property
    def position_dims(self) -> tuple[int, ...]:
        exempt = set(self.delta_exempt_dims)
        return tuple(d for d in range(self.dim) if d not in exempt)


def ensure_chunk(values: np.ndarray, layout: ActionLayout, name: str = "chunk") -> np.ndarray:
    """Validate an (H, D) or (N, H, D) array against the layout; returns float64."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim not in (2, 3) or arr.shape[-2:] != (layout.horizon, layout.dim):
        raise LayoutError(
            f"{name}: expected trailing shape ({layout.horizon}, {layout.dim}), got {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise LayoutError(f"{name}: non-finite entries")
    return arr


def _ensure_joints(current_joints: np.ndarray, layout: ActionLayout) -> np.ndarray:
    q = np.asarray(current_joints, dtype=np.float64)
    if q.shape != (layout.dim,):
        raise LayoutError(f"current_joints: expected shape ({layout.dim},), got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise LayoutError("current_joints: non-finite entries")
    return q


def to_delta(absolute_chunk: np.ndarray, current_joints: np.ndarray, layout: ActionLayout) -> np.ndarray:
    """Express position dims as offsets from the current joint state.

    out[i, d] = abs[i, d] - q[d] for position dims; velocity and gripper dims
    are copied verbatim.
    """
    chunk = ensure_chunk(absolute_chunk, layout, "absolute_chunk")
    q = _ensure_joints(current_joints, layout)
    out = chunk.copy()
    pos = list(layout.position_dims)
    out[..., pos] -= q[pos]
    return out


def from_delta(delta_chunk: np.ndarray, current_joints: np.ndarray, layout: ActionLayout) -> np.ndarray:
    """Exact inverse of to_delta."""
    chunk = ensure_chunk(delta_chunk, layout, "delta_chunk")
    q = _ensure_joints(current_joints, layout)
    out = chunk.copy()
    pos = list(layout.position_dims)
    out[..., pos] += q[pos]
    return out


class ChunkNormalizer(BaseEstimator, TransformerMixin):
    """Per-timestamp normalizer for delta action chunks.

    Fits a mean and population std per (timestep, dimension) cell. Exempt
    dimensions (by default the layout's velocity and gripper dims) instead get
    one global mean/std per dimension, broadcast over the horizon, so their
    statistics are row-constant.

    Fitted attributes: mu_ and sigma_ (both (H, D), read-only), exempt_mask_
    (length-D bool), n_chunks_.
    """

    def __init__(
        self,
        layout: ActionLayout,
        exempt_dims: Optional[Sequence[int]] = None,
        epsilon_floor: float = 1e-6,
    ):
        self.layout = layout
        self.exempt_dims = exempt_dims
        self.epsilon_floor = epsilon_floor

    def _resolved_exempt(self) -> tuple[int, ...]:
        if self.exempt_dims is None:
            return self.layout.delta_exempt_dims
        dims = tuple(sorted(set(int(d) for d in self.exempt_dims)))
        for d in dims:
            if not 0 <= d < self.layout.dim:
                raise LayoutError(f"exempt dim {d} outside [0, {self.layout.dim})")
        return dims

    def fit(self, X, y=None):
        return self.fit_blocks([X])

    def fit_blocks(self, blocks: Iterable[np.ndarray]):
        """Fit from an iterable of (n, H, D) delta-chunk blocks (streaming).

        One uncentered pass in float64; memory stays O(H*D) regardless of the
        number of chunks.
        """
        H, D = self.layout.horizon, self.layout.dim
        total = np.zeros((H, D))
        total_sq = np.zeros((H, D))
        n = 0
        for block in blocks:
            arr = ensure_chunk(block, self.layout, "block")
            if arr.ndim == 2:
                arr = arr[None]
            total += arr.sum(axis=0)
            total_sq += np.square(arr).sum(axis=0)
            n += arr.shape[0]
        if n == 0:
            raise EstimationError("cannot fit normalization on an empty dataset")

        mu = total / n
        var = np.maximum(total_sq / n - np.square(mu), 0.0)

        exempt = self._resolved_exempt()
        if exempt:
            cols = list(exempt)
            # Global moments pool every (chunk, row) sample of the dimension.
            g_mean = total[:, cols].sum(axis=0) / (n * H)
            g_sq = total_sq[:, cols].sum(axis=0) / (n * H)
            mu[:, cols] = g_mean
            var[:, cols] = np.maximum(g_sq - np.square(g_mean), 0.0)

        sigma = np.maximum(np.sqrt(var), self.epsilon_floor)
        mu.flags.writeable = False
        sigma.flags.writeable = False
        self.mu_ = mu
        self.sigma_ = sigma
        mask = np.zeros(D, dtype=bool)
        mask[list(exempt)] = True
        mask.flags.writeable = False
        self.exempt_mask_ = mask
        self.n_chunks_ = n
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "mu_")
        arr = ensure_chunk(X, self.layout, "chunk")
        return (arr - self.mu_) / self.sigma_

    def inverse_transform(self, X) -> np.ndarray:
        check_is_fitted(self, "mu_")
        arr = ensure_chunk(X, self.layout, "chunk")
        return arr * self.sigma_ + self.mu_


def normalize(chunk: np.ndarray, stats: ChunkNormalizer) -> np.ndarray:
    return stats.transform(chunk)


def denormalize(chunk: np.ndarray, stats: ChunkNormalizer) -> np.ndarray:
    return stats.inverse_transform(chunk)


def fit_normalization(dataset, layout: ActionLayout, exempt_dims=None, epsilon_floor: float = 1e-6) -> ChunkNormalizer:
    """Fit normalization stats from a dataset or a raw (N, H, D) delta array.

    Datasets are streamed episode by episode through their delta_chunk_blocks
    view; raw arrays are fitted directly.
    """
    norm = ChunkNormalizer(layout, exempt_dims=exempt_dims, epsilon_floor=epsilon_floor)
    if hasattr(dataset, "delta_chunk_blocks"):
        return norm.fit_blocks(dataset.delta_chunk_blocks())
    return norm.fit(np.asarray(dataset))
