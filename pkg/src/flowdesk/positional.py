"""
Multimodal rotary position encoding.

Image tokens get ``(frame, row, col)`` ids centered on the middle of their
grid, text tokens sit on the diagonal ``row == col`` just past the image
corner, and every query/key channel pair is rotated by ``id_axis * omega_j``
for the axis block it belongs to.
"""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import torch

from .exceptions import DimensionError, ShapeError, ValidationError

__all__ = [
    "PositionId",
    "RopeConfig",
    "RopeTable",
    "apply_rotary",
    "default_axis_split",
    "image_position_ids",
    "layout_position_ids",
    "position_tensor",
    "text_offset",
    "text_position_ids",
]

DEFAULT_BASE = 10000.0


class PositionId(NamedTuple):
    frame: int
    row: int
    col: int


def default_axis_split(head_dim):
    """
    Channel pairs per (frame, row, col) axis for a head dimension.

    Two pairs go to the frame axis and the rest is shared by rows and
    columns, rows taking the odd pair if there is one.  Heads with fewer
    than four pairs get no frame channels.
    """
    if head_dim < 2 or head_dim % 2:
        raise ValidationError(
            f"head_dim must be a positive even integer, got {head_dim}"
        )
    pairs = head_dim // 2
    frame = 2 if pairs >= 4 else 0
    rest = pairs - frame
    col = rest // 2
    return (frame, rest - col, col)


@dataclass(frozen=True)
class RopeConfig:
    """
    Rotary encoding parameters.

    Parameters
    ----------
    head_dim : int
        Per-head vector length; must be even.
    axis_split : tuple of int
        Channel pairs given to the frame, row and column axes.
        ``2 * sum(axis_split) == head_dim``.
    base : float
        Frequency base.
    """

    head_dim: int
    axis_split: tuple
    base: float = DEFAULT_BASE

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2:
            raise ValidationError(
                f"rope head_dim must be a positive even integer, got {self.head_dim}"
            )
        split = tuple(int(n) for n in self.axis_split)
        if len(split) != 3 or any(n < 0 for n in split):
            raise ValidationError(
                f"rope axis_split must be three non-negative integers, got {split}"
            )
        if 2 * sum(split) != self.head_dim:
            raise ValidationError(
                f"rope axis_split {split} does not cover head_dim {self.head_dim}"
            )
        if not self.base > 0:
            raise ValidationError(f"rope base must be positive, got {self.base}")
        object.__setattr__(self, "axis_split", split)
        object.__setattr__(self, "base", float(self.base))

    @classmethod
    def for_head_dim(cls, head_dim, base=DEFAULT_BASE):
        return cls(head_dim, default_axis_split(head_dim), base)

    def to_dict(self):
        return {
            "head_dim": self.head_dim,
            "axis_split": list(self.axis_split),
            "base": self.base,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["head_dim"]), tuple(d["axis_split"]), float(d["base"]))


@dataclass(frozen=True)
class RopeTable:
    """
    Per-axis angular frequencies ``omega_j = base ** (-j / axis_pairs)``.
    """

    frequencies: tuple

    @classmethod
    def from_config(cls, config):
        return _table(config)

    def angles(self, ids):
        """
        Rotation angle of every channel pair, shape ``(n_ids, head_dim // 2)``,
        in float64.
        """
        ids = position_tensor(ids).to(torch.float64)
        blocks = [
            ids[:, axis, None] * torch.tensor(freqs, dtype=torch.float64)[None, :]
            for axis, freqs in enumerate(self.frequencies)
        ]
        return torch.cat(blocks, dim=-1)


@lru_cache(maxsize=32)
def _table(config):
    frequencies = tuple(
        tuple(config.base ** (-j / pairs) for j in range(pairs))
        for pairs in config.axis_split
    )
    return RopeTable(frequencies)


def image_position_ids(frame, height, width):
    """
    Centered ids of an ``height x width`` grid, row-major.

    ``id(r, c) = (frame, r - height // 2, c - width // 2)``
    """
    if height < 1 or width < 1:
        raise DimensionError(f"image grid must be at least 1x1, got {height}x{width}")
    if frame < 0:
        raise DimensionError(f"frame index must be non-negative, got {frame}")
    top, left = height // 2, width // 2
    return [
        PositionId(frame, r - top, c - left)
        for r in range(height)
        for c in range(width)
    ]


def text_position_ids(offset, length):
    """
    Diagonal ids ``(0, offset + k, offset + k)`` for ``length`` text tokens.
    """
    if offset < 0 or length < 0:
        raise DimensionError(
            f"text offset and length must be non-negative, got {offset}, {length}"
        )
    return [PositionId(0, offset + k, offset + k) for k in range(length)]


def text_offset(height, width):
    """
    First diagonal position that lies past the corner of a centered grid.
    """
    return max(math.ceil(height / 2), math.ceil(width / 2)) + 1


def position_tensor(ids):
    """
    Convert ids to an ``(n, 3)`` int64 tensor.  Tensors pass through.
    """
    if isinstance(ids, torch.Tensor):
        if ids.ndim != 2 or ids.shape[-1] != 3:
            raise ShapeError(
                f"position ids must have shape (n, 3), got {tuple(ids.shape)}"
            )
        return ids.to(torch.int64)
    if len(ids) == 0:
        return torch.zeros((0, 3), dtype=torch.int64)
    return torch.tensor([tuple(i) for i in ids], dtype=torch.int64)


@lru_cache(maxsize=64)
def layout_position_ids(text_length, height, width, conditioned=False, frames=(0, 1)):
    """
    Joint sequence layout ``[text, (condition image), target image]``.

    Without a condition image the target sits on frame 0.  With one, the
    condition image uses ``frames[0]`` and the noised target ``frames[1]``.
    """
    ids = text_position_ids(text_offset(height, width), text_length)
    if conditioned:
        ids += image_position_ids(frames[0], height, width)
        ids += image_position_ids(frames[1], height, width)
    else:
        ids += image_position_ids(0, height, width)
    return position_tensor(ids)


def apply_rotary(vectors, ids, config):
    """
    Rotate channel pairs ``(2j, 2j + 1)`` of every vector by its position.

    Parameters
    ----------
    vectors : torch.Tensor
        Shape ``(..., n, head_dim)``.
    ids : sequence of PositionId or torch.Tensor
        ``n`` position ids.
    config : RopeConfig

    Returns
    -------
    torch.Tensor
        Rotated vectors, same shape and dtype.
    """
    ids = position_tensor(ids)
    if vectors.ndim < 2 or vectors.shape[-2] != ids.shape[0]:
        raise ShapeError(
            f"{ids.shape[0]} position ids for vectors of shape {tuple(vectors.shape)}"
        )
    if vectors.shape[-1] != config.head_dim:
        raise ShapeError(
            f"vector length {vectors.shape[-1]} != rope head_dim {config.head_dim}"
        )
    angles = RopeTable.from_config(config).angles(ids)
    cos = torch.cos(angles).to(device=vectors.device, dtype=vectors.dtype)
    sin = torch.sin(angles).to(device=vectors.device, dtype=vectors.dtype)
    pairs = vectors.unflatten(-1, (-1, 2))
    x0, x1 = pairs[..., 0], pairs[..., 1]
    rotated = torch.stack((x0 * cos - x1 * sin, x0 * sin + x1 * cos), dim=-1)
    return rotated.flatten(-2)
