import numpy as np
import pytest
import torch

from flowdesk.exceptions import DimensionError, ShapeError, ValidationError
from flowdesk.positional import (
    PositionId,
    RopeConfig,
    RopeTable,
    apply_rotary,
    default_axis_split,
    image_position_ids,
    layout_position_ids,
    position_tensor,
    text_offset,
    text_position_ids,
)

CONFIG = RopeConfig(head_dim=16, axis_split=(2, 3, 3))


def random_ids(rng, n, low=-20, high=20):
    return torch.from_numpy(rng.integers(low, high, size=(n, 3)))


def complex_rotary(x, positions, config):
    """Rotary encoding written with complex multiplication."""
    freqs = np.concatenate(
        [
            config.base ** (-np.arange(pairs) / pairs) if pairs else np.zeros(0)
            for pairs in config.axis_split
        ]
    )
    axes = np.repeat(np.arange(3), config.axis_split)
    theta = positions[:, axes] * freqs[None, :]
    z = x[..., 0::2] + 1j * x[..., 1::2]
    z = z * np.exp(1j * theta)
    out = np.empty_like(x)
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def test_image_ids_centered():
    ids = image_position_ids(1, 3, 4)
    assert ids[0] == PositionId(1, -1, -2)
    assert ids[-1] == PositionId(1, 1, 1)
    assert len(ids) == 12


def test_one_by_one_grid():
    assert image_position_ids(0, 1, 1) == [PositionId(0, 0, 0)]


def test_text_ids_on_diagonal_past_corner():
    offset = text_offset(4, 6)
    assert offset == 4
    ids = text_position_ids(offset, 3)
    assert ids == [PositionId(0, 4, 4), PositionId(0, 5, 5), PositionId(0, 6, 6)]
    image_rows = {i.row for i in image_position_ids(0, 4, 6)}
    assert all(i.row not in image_rows for i in ids)


def test_empty_text():
    assert text_position_ids(3, 0) == []
    assert position_tensor([]).shape == (0, 3)


@pytest.mark.parametrize(
    ("frame", "height", "width"), [(0, 0, 4), (0, 3, -1), (-1, 2, 2)]
)
def test_bad_grid(frame, height, width):
    with pytest.raises(DimensionError):
        image_position_ids(frame, height, width)


def test_layout_frames():
    ids = layout_position_ids(2, 2, 2, conditioned=True, frames=(0, 1))
    assert ids.shape == (2 + 4 + 4, 3)
    assert ids[2:6, 0].tolist() == [0] * 4
    assert ids[6:, 0].tolist() == [1] * 4
    unconditioned = layout_position_ids(2, 2, 2)
    assert unconditioned.shape == (6, 3)
    assert unconditioned[2:, 0].tolist() == [0] * 4


def test_default_axis_split():
    assert default_axis_split(16) == (2, 3, 3)
    assert default_axis_split(6) == (0, 2, 1)
    with pytest.raises(ValidationError):
        default_axis_split(7)


@pytest.mark.parametrize(
    ("head_dim", "split"), [(16, (2, 3, 2)), (15, (2, 3, 3)), (16, (2, -1, 7))]
)
def test_bad_rope_config(head_dim, split):
    with pytest.raises(ValidationError):
        RopeConfig(head_dim, split)


def test_table_frequencies():
    table = RopeTable.from_config(CONFIG)
    assert table.frequencies[0] == (1.0, CONFIG.base ** (-1 / 2))
    assert len(table.frequencies[1]) == 3


def test_relative_position_invariance():
    rng = np.random.default_rng(0)
    n = 1000
    q = torch.from_numpy(rng.standard_normal((n, 16)))
    k = torch.from_numpy(rng.standard_normal((n, 16)))
    ids_q = random_ids(rng, n)
    ids_k = random_ids(rng, n)
    shift = random_ids(rng, n, -50, 50)
    # Apply the shift per instance; every row is its own (q, k) problem.
    before = (apply_rotary(q, ids_q, CONFIG) * apply_rotary(k, ids_k, CONFIG)).sum(-1)
    after = (
        apply_rotary(q, ids_q + shift, CONFIG) * apply_rotary(k, ids_k + shift, CONFIG)
    ).sum(-1)
    assert torch.max(torch.abs(before - after)) < 1e-12


def test_norm_preserved():
    rng = np.random.default_rng(1)
    x = torch.from_numpy(rng.standard_normal((1000, 16)))
    rotated = apply_rotary(x, random_ids(rng, 1000), CONFIG)
    assert torch.max(torch.abs(rotated.norm(dim=-1) - x.norm(dim=-1))) < 1e-12


def test_text_matches_complex_rotary():
    rng = np.random.default_rng(2)
    n = 1000
    x = rng.standard_normal((n, 16))
    p = rng.integers(0, 64, size=n)
    ids = text_position_ids(0, 64)
    chosen = position_tensor([ids[i] for i in p])
    expected = complex_rotary(x, chosen.numpy().astype(np.float64), CONFIG)
    actual = apply_rotary(torch.from_numpy(x), chosen, CONFIG).numpy()
    np.testing.assert_allclose(actual, expected, rtol=0, atol=1e-10)


def test_zero_position_is_identity():
    x = torch.randn(2, 5, 16, dtype=torch.float64)
    ids = torch.zeros((5, 3), dtype=torch.int64)
    torch.testing.assert_close(apply_rotary(x, ids, CONFIG), x, rtol=0, atol=0)


def test_shape_checks():
    x = torch.zeros(4, 16)
    with pytest.raises(ShapeError):
        apply_rotary(x, torch.zeros((3, 3), dtype=torch.int64), CONFIG)
    with pytest.raises(ShapeError):
        apply_rotary(torch.zeros(4, 8), torch.zeros((4, 3), dtype=torch.int64), CONFIG)
    with pytest.raises(ShapeError):
        position_tensor(torch.zeros((4, 2)))
