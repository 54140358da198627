import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from corrflow.actions import (
    ActionLayout,
    ChunkNormalizer,
    denormalize,
    ensure_chunk,
    fit_normalization,
    from_delta,
    normalize,
    to_delta,
)
from corrflow.errors import EstimationError, LayoutError


def small_layout():
    return ActionLayout(horizon=4, dim=5, velocity_dims=(0, 1), gripper_dims=(4,))


def test_layout_validation():
    with pytest.raises(LayoutError):
        ActionLayout(horizon=1, dim=5)
    with pytest.raises(LayoutError):
        ActionLayout(horizon=4, dim=3, velocity_dims=(0,), gripper_dims=(0,))
    with pytest.raises(LayoutError):
        ActionLayout(horizon=4, dim=3, velocity_dims=(5,), gripper_dims=())
    layout = small_layout()
    assert layout.delta_exempt_dims == (0, 1, 4)
    assert layout.position_dims == (2, 3)


def test_default_layout_shape_contract():
    layout = ActionLayout()
    assert (layout.horizon, layout.dim) == (30, 23)
    ensure_chunk(np.zeros((30, 23)), layout)
    with pytest.raises(LayoutError):
        ensure_chunk(np.zeros((30, 24)), layout)


def test_to_delta_identity_rows():
    layout = small_layout()
    q = np.array([0.3, -0.2, 1.5, -0.7, 0.9])
    chunk = np.tile(q, (layout.horizon, 1))
    delta = to_delta(chunk, q, layout)
    # Position dims collapse to zero; command dims pass through.
    assert np.allclose(delta[:, [2, 3]], 0.0)
    assert np.array_equal(delta[:, [0, 1, 4]], chunk[:, [0, 1, 4]])


def test_delta_round_trip():
    layout = small_layout()
    rng = np.random.default_rng(7)
    for _ in range(200):
        chunk = rng.normal(size=(layout.horizon, layout.dim)) * 3
        q = rng.normal(size=layout.dim)
        back = from_delta(to_delta(chunk, q, layout), q, layout)
        assert np.max(np.abs(back - chunk)) < 1e-12


def test_from_delta_zero_delta():
    layout = small_layout()
    q = np.arange(5.0)
    out = from_delta(np.zeros((4, 5)), q, layout)
    assert np.array_equal(out[:, [2, 3]], np.tile(q[[2, 3]], (4, 1)))
    assert np.array_equal(out[:, [0, 1, 4]], np.zeros((4, 3)))


def test_fit_two_value_cells():
    # Two chunks holding 0 and 2 in every cell: mu = 1, population sigma = 1.
    layout = ActionLayout(horizon=3, dim=2, velocity_dims=(), gripper_dims=())
    chunks = np.stack([np.zeros((3, 2)), np.full((3, 2), 2.0)])
    stats = fit_normalization(chunks, layout)
    assert np.allclose(stats.mu_, 1.0)
    assert np.allclose(stats.sigma_, 1.0)


def test_fit_degenerate_variance():
    layout = small_layout()
    chunk = np.arange(20.0).reshape(4, 5)
    # Exempt dims pool over rows, so hold them row-constant to make every
    # cell's sample set a single repeated value.
    chunk[:, [0, 1, 4]] = [0.5, -1.5, 2.0]
    stats = fit_normalization(np.stack([chunk] * 3), layout)
    assert np.all(stats.sigma_ == stats.epsilon_floor)
    assert np.allclose(stats.mu_, chunk)


def test_exempt_stats_row_constant():
    layout = small_layout()
    rng = np.random.default_rng(3)
    stats = fit_normalization(rng.normal(size=(50, 4, 5)), layout)
    for d in layout.delta_exempt_dims:
        assert np.ptp(stats.mu_[:, d]) == 0.0
        assert np.ptp(stats.sigma_[:, d]) == 0.0


def test_normalized_moments():
    layout = small_layout()
    rng = np.random.default_rng(11)
    chunks = rng.normal(loc=0.7, scale=2.5, size=(400, 4, 5))
    stats = fit_normalization(chunks, layout)
    normed = stats.transform(chunks)
    mean = normed.mean(axis=0)
    std = normed.std(axis=0)
    pos = list(layout.position_dims)
    assert np.max(np.abs(mean[:, pos])) < 1e-6
    assert np.max(np.abs(std[:, pos] - 1.0)) < 1e-6


def test_normalize_round_trip():
    layout = small_layout()
    rng = np.random.default_rng(5)
    stats = fit_normalization(rng.normal(size=(30, 4, 5)), layout)
    chunk = rng.normal(size=(4, 5)) * 4
    assert np.max(np.abs(denormalize(normalize(chunk, stats), stats) - chunk)) < 1e-9
    assert np.allclose(normalize(stats.mu_.copy(), stats), 0.0)


def test_unfitted_and_empty():
    layout = small_layout()
    norm = ChunkNormalizer(layout)
    with pytest.raises(NotFittedError):
        norm.transform(np.zeros((4, 5)))
    with pytest.raises(EstimationError):
        norm.fit_blocks([])


def test_streamed_fit_matches_single_pass():
    layout = small_layout()
    rng = np.random.default_rng(13)
    chunks = rng.normal(size=(60, 4, 5))
    whole = ChunkNormalizer(layout).fit(chunks)
    streamed = ChunkNormalizer(layout).fit_blocks([chunks[:17], chunks[17:40], chunks[40:]])
    assert np.allclose(whole.mu_, streamed.mu_, atol=1e-12)
    assert np.allclose(whole.sigma_, streamed.sigma_, atol=1e-12)
