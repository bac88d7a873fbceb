"""
Toy datasets and rewards: 2D Gaussian mixtures, micro-glyph rendering from
an embedded 5x7 font, and glyph editing pairs.
"""

import abc
import logging
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import yaml
from einops import rearrange
from PIL import Image

from .exceptions import (
    CharsetError,
    DimensionError,
    EditOpError,
    ShapeError,
    ValidationError,
    VocabError,
)

__all__ = [
    "DEFAULT_CHARSET",
    "EDIT_OPS",
    "Batch",
    "EditTask",
    "GlyphSpec",
    "GlyphTask",
    "MixtureSpec",
    "MixtureTask",
    "Patchifier",
    "Task",
    "apply_edit",
    "edit_token",
    "font_table",
    "glyph_reward",
    "make_edit_pair",
    "make_task",
    "pixel_agreement",
    "read_pgm",
    "read_points_csv",
    "render_glyph",
    "render_text",
    "sample_mixture",
    "write_pgm",
    "write_points_csv",
]

logger = logging.getLogger(__name__)

GLYPH_ROWS = 7
GLYPH_COLS = 5
DEFAULT_CHARSET = "0123456789AEHOTX"
EDIT_OPS = ("invert", "hflip", "vshift1")

_FONT_PATH = os.path.join(os.path.dirname(__file__), "resources", "font5x7.yaml")


@lru_cache
def font_table():
    """
    The embedded 5x7 font as ``{char: uint8 array of shape (7, 5)}``.
    """
    with open(_FONT_PATH) as fd:
        rows = yaml.safe_load(fd)
    table = {}
    for char, lines in rows.items():
        bitmap = np.array([[c == "#" for c in line] for line in lines], dtype=np.uint8)
        if bitmap.shape != (GLYPH_ROWS, GLYPH_COLS):
            raise ValidationError(f"font template {char!r} is not 5x7")
        table[str(char)] = bitmap
    return table


@dataclass(frozen=True)
class GlyphSpec:
    """
    Glyph rendering parameters.

    Parameters
    ----------
    charset : str
        Ordered characters; the index of a character is its prompt token.
    canvas : int
        Side of the square canvas.
    placement : tuple of int or None
        Top-left ``(row, col)`` of the 5x7 template; ``None`` centers it.
    """

    charset: str = DEFAULT_CHARSET
    canvas: int = 16
    placement: tuple = None

    def __post_init__(self):
        if self.canvas < GLYPH_ROWS:
            raise ValidationError(f"glyph canvas must be >= 7, got {self.canvas}")
        if len(set(self.charset)) != len(self.charset) or not self.charset:
            raise ValidationError(
                f"glyph charset must be unique characters: {self.charset!r}"
            )
        missing = [c for c in self.charset if c not in font_table()]
        if missing:
            raise ValidationError(f"no 5x7 template for charset characters {missing}")
        if self.placement is None:
            placement = (
                (self.canvas - GLYPH_ROWS) // 2,
                (self.canvas - GLYPH_COLS) // 2,
            )
        else:
            placement = tuple(int(v) for v in self.placement)
        top, left = placement
        if (
            top < 0
            or left < 0
            or top + GLYPH_ROWS > self.canvas
            or left + GLYPH_COLS > self.canvas
        ):
            raise ValidationError(
                f"glyph placement {placement} does not fit a {self.canvas} canvas"
            )
        object.__setattr__(self, "placement", placement)

    @classmethod
    def from_section(cls, section, canvas=None):
        placement = section.get("placement") or None
        return cls(
            charset=section["charset"],
            canvas=int(canvas if canvas is not None else section["canvas"]),
            placement=tuple(placement) if placement else None,
        )

    def with_canvas(self, canvas):
        """Same charset on another canvas size, centered."""
        if canvas == self.canvas:
            return self
        return GlyphSpec(self.charset, canvas)

    def token(self, char):
        try:
            return self.charset.index(char)
        except ValueError:
            raise CharsetError(
                f"character {char!r} is not in charset {self.charset!r}"
            ) from None

    def template(self, char):
        if len(char) != 1 or char not in self.charset:
            raise CharsetError(f"character {char!r} is not in charset {self.charset!r}")
        return font_table()[char]


def render_glyph(spec, char):
    """
    Render one character onto a blank canvas.

    Returns
    -------
    numpy.ndarray
        ``(canvas, canvas)`` float32 bitmap, background 0 and strokes 1.

    Raises
    ------
    CharsetError
        If ``char`` is not in the charset.
    """
    template = spec.template(char)
    canvas = np.zeros((spec.canvas, spec.canvas), dtype=np.float32)
    top, left = spec.placement
    canvas[top : top + GLYPH_ROWS, left : left + GLYPH_COLS] = template
    return canvas


def render_text(spec, text):
    """
    Render a string left to right with one blank column between glyphs.

    The canvas is ``spec.canvas`` rows high and widened as needed.  A string
    containing any character outside the charset is rejected as a whole.
    """
    bad = [c for c in text if c not in spec.charset]
    if bad:
        raise CharsetError(
            f"text {text!r} contains characters outside the charset: {bad}; "
            "the whole string is discarded"
        )
    top, left = spec.placement
    needed = len(text) * (GLYPH_COLS + 1) - 1 if text else 0
    width = max(spec.canvas, needed + 2 * left)
    canvas = np.zeros((spec.canvas, width), dtype=np.float32)
    for i, char in enumerate(text):
        col = left + i * (GLYPH_COLS + 1)
        canvas[top : top + GLYPH_ROWS, col : col + GLYPH_COLS] = font_table()[char]
    return canvas


def pixel_agreement(sample, target):
    """
    ``1 - mean |sample - target|`` over the last two axes, clipped to [0, 1].
    """
    sample = np.asarray(sample, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if sample.shape[-2:] != target.shape[-2:]:
        raise ShapeError(
            f"sample shape {sample.shape} does not match target shape {target.shape}"
        )
    err = np.abs(sample - target).mean(axis=(-2, -1))
    return np.clip(1.0 - err, 0.0, 1.0)


def glyph_reward(sample, target_char, spec):
    """
    Pixel-agreement reward of a raw (unthresholded) canvas against the
    rendered target character.

    ``sample`` may carry leading batch axes; the reward then has that shape.
    """
    sample = np.asarray(sample)
    if sample.shape[-2:] != (spec.canvas, spec.canvas):
        raise ShapeError(
            f"sample shape {sample.shape} does not end in the "
            f"{spec.canvas}x{spec.canvas} canvas"
        )
    reward = pixel_agreement(sample, render_glyph(spec, target_char))
    return float(reward) if reward.ndim == 0 else reward


def apply_edit(bitmap, op):
    """Apply an edit operation to a 2-D bitmap."""
    if op == "invert":
        return (1.0 - bitmap).astype(bitmap.dtype)
    if op == "hflip":
        return np.ascontiguousarray(bitmap[:, ::-1])
    if op == "vshift1":
        shifted = np.zeros_like(bitmap)
        shifted[1:] = bitmap[:-1]
        return shifted
    raise EditOpError(f"unknown edit operation {op!r}; expected one of {EDIT_OPS}")


def edit_token(spec, op):
    """Instruction token of an edit op; follows the charset tokens."""
    if op not in EDIT_OPS:
        raise EditOpError(f"unknown edit operation {op!r}; expected one of {EDIT_OPS}")
    return len(spec.charset) + EDIT_OPS.index(op)


def make_edit_pair(spec, char, op):
    """
    Returns
    -------
    condition, target : numpy.ndarray
        Source glyph and its edited version.
    instruction : int
        Prompt token of ``op``.
    """
    instruction = edit_token(spec, op)
    condition = render_glyph(spec, char)
    return condition, apply_edit(condition, op), instruction


@dataclass(frozen=True)
class MixtureSpec:
    """
    Gaussian mixture in the plane with a shared covariance.

    Parameters
    ----------
    means : array-like, shape (K, 2)
    covariance : array-like, shape (2, 2)
        Symmetric positive definite.
    weights : array-like, shape (K,)
        Non-negative, summing to one.
    """

    means: tuple
    covariance: tuple = ((1.0, 0.0), (0.0, 1.0))
    weights: tuple = None

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2 or means.shape[1] != 2 or len(means) < 1:
            raise ValidationError(
                f"mixture means must be (K, 2), got shape {means.shape}"
            )
        cov = np.asarray(self.covariance, dtype=np.float64)
        if cov.shape != (2, 2) or not np.array_equal(cov, cov.T):
            raise ValidationError("mixture covariance must be a symmetric 2x2 matrix")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValidationError(
                "mixture covariance is not positive definite"
            ) from None
        if self.weights is None:
            weights = np.full(len(means), 1.0 / len(means))
        else:
            weights = np.asarray(self.weights, dtype=np.float64)
        if weights.shape != (len(means),) or (weights < 0).any():
            raise ValidationError(
                "mixture weights must be one non-negative value per mean"
            )
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValidationError(f"mixture weights sum to {weights.sum()!r}, not 1")
        object.__setattr__(self, "means", tuple(map(tuple, means.tolist())))
        object.__setattr__(self, "covariance", tuple(map(tuple, cov.tolist())))
        object.__setattr__(self, "weights", tuple(weights.tolist()))

    @classmethod
    def from_section(cls, section):
        means = [float(v) for v in section["means"]]
        cov = [float(v) for v in section["covariance"]]
        weights = section.get("weights") or None
        if len(means) % 2 or len(cov) != 4:
            raise ValidationError(
                "mixture.means must list x, y pairs and mixture.covariance 4 values"
            )
        return cls(
            means=tuple(zip(means[::2], means[1::2])),
            covariance=((cov[0], cov[1]), (cov[2], cov[3])),
            weights=tuple(float(w) for w in weights) if weights else None,
        )


def sample_mixture(spec, n, rng):
    """
    Draw ``n`` i.i.d. points.

    Parameters
    ----------
    spec : MixtureSpec
    n : int
    rng : numpy.random.Generator

    Returns
    -------
    numpy.ndarray
        ``(n, 2)`` float64.
    """
    if n < 0:
        raise DimensionError(f"sample count must be >= 0, got {n}")
    means = np.asarray(spec.means)
    chol = np.linalg.cholesky(np.asarray(spec.covariance))
    components = rng.choice(len(means), size=n, p=np.asarray(spec.weights))
    z = rng.standard_normal((n, 2))
    return means[components] + z @ chol.T


class Patchifier:
    """
    Lossless map between ``(..., H, W, C)`` canvases and
    ``(..., H/p * W/p, p*p*C)`` patch tokens.

    Pixels are mapped affinely, ``latent = scale * pixel + offset``; glyph
    canvases use ``2 * pixel - 1``.
    """

    def __init__(self, patch, channels=1, scale=2.0, offset=-1.0):
        if patch < 1 or channels < 1:
            raise ValidationError("patch and channels must be >= 1")
        self.patch = patch
        self.channels = channels
        self.scale = scale
        self.offset = offset

    @property
    def token_dim(self):
        return self.patch * self.patch * self.channels

    def grid(self, height, width):
        if height % self.patch or width % self.patch:
            raise ShapeError(
                f"patch {self.patch} does not divide a {height}x{width} canvas"
            )
        return height // self.patch, width // self.patch

    def encode(self, canvas):
        canvas = np.asarray(canvas, dtype=np.float32)
        if self.channels == 1 and (canvas.ndim < 3 or canvas.shape[-1] != 1):
            canvas = canvas[..., None]
        if canvas.ndim < 3 or canvas.shape[-1] != self.channels:
            raise ShapeError(
                f"canvas of shape {canvas.shape} does not have {self.channels} channels"
            )
        self.grid(*canvas.shape[-3:-1])
        tokens = rearrange(
            canvas,
            "... (h p1) (w p2) c -> ... (h w) (p1 p2 c)",
            p1=self.patch,
            p2=self.patch,
        )
        return (self.scale * tokens + self.offset).astype(np.float32)

    def decode(self, tokens, grid):
        tokens = np.asarray(tokens, dtype=np.float32)
        rows, cols = grid
        if tokens.shape[-2:] != (rows * cols, self.token_dim):
            raise ShapeError(
                f"tokens of shape {tokens.shape} do not fill a {rows}x{cols} grid "
                f"of {self.token_dim}-value patches"
            )
        canvas = rearrange(
            (tokens - self.offset) / self.scale,
            "... (h w) (p1 p2 c) -> ... (h p1) (w p2) c",
            h=rows,
            p1=self.patch,
            p2=self.patch,
        )
        return canvas[..., 0] if self.channels == 1 else canvas


def write_pgm(path, canvas):
    """Save a ``[0, 1]`` canvas as a binary (P5) graymap."""
    canvas = np.asarray(canvas, dtype=np.float64)
    if canvas.ndim != 2:
        raise ShapeError(f"PGM canvas must be 2-D, got shape {canvas.shape}")
    pixels = np.rint(np.clip(canvas, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PPM")


def read_pgm(path):
    """Load a graymap as a float32 canvas in ``[0, 1]``."""
    with Image.open(path) as image:
        if image.mode != "L":
            raise ShapeError(f"{path} is not a single-channel graymap")
        return np.asarray(image, dtype=np.float32) / 255.0


def write_points_csv(path, points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    np.savetxt(path, points, fmt="%.9g", delimiter=",", header="x,y", comments="")


def read_points_csv(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


@dataclass(frozen=True)
class Batch:
    """
    One training batch.

    Parameters
    ----------
    tokens : numpy.ndarray
        ``(B, L)`` int64 prompt ids.
    latents : numpy.ndarray
        ``(B, N, token_dim)`` float32 clean target latents.
    grid : tuple of int
        Token grid of the latents.
    condition : numpy.ndarray or None
        Clean condition-image latents, same shape as ``latents``.
    labels : tuple of str
        Target character of every element (empty for the mixture task).
    """

    tokens: np.ndarray
    latents: np.ndarray
    grid: tuple
    condition: np.ndarray = None
    labels: tuple = ()

    def __len__(self):
        return len(self.latents)

    def subset(self, index):
        """Batch of the elements selected by a slice or index array."""
        labels = np.asarray(self.labels, dtype=object)[index] if self.labels else ()
        return Batch(
            tokens=self.tokens[index],
            latents=self.latents[index],
            grid=self.grid,
            condition=None if self.condition is None else self.condition[index],
            labels=tuple(labels),
        )


class Task(abc.ABC):
    """
    A toy dataset: batch synthesis, prompt tokens and optional rewards.
    """

    name = None
    #: Whether `reward` is defined.
    has_reward = True

    @abc.abstractmethod
    def default_buckets(self):
        """Canvas ``(height, width)`` pairs to train on."""

    @abc.abstractmethod
    def sample_batch(self, rng, size, bucket):
        """Synthesize a `Batch` for a ``(height, width)`` bucket."""

    @property
    @abc.abstractmethod
    def vocab(self):
        """Number of prompt tokens the task uses."""

    @property
    @abc.abstractmethod
    def patchifier(self):
        """The `Patchifier` mapping canvases to latents."""

    def prompts(self):
        """Evaluation prompts as ``(label, tokens, condition canvas or None)``."""
        return [("", np.zeros(1, dtype=np.int64), None)]

    def prompt(self, label):
        """The ``(label, tokens, condition)`` prompt named ``label``."""
        for prompt in self.prompts():
            if prompt[0] == label:
                return prompt
        raise VocabError(f"task {self.name!r} has no prompt {label!r}")

    def target(self, label, char=None):
        """
        Golden canvas for prompt ``label``, or for character ``char`` under
        the same prompt.
        """
        raise NotImplementedError(f"task {self.name!r} renders no targets")

    def reward(self, canvas, label, condition=None):
        raise NotImplementedError(f"task {self.name!r} defines no reward")


class MixtureTask(Task):
    """2D points as a one-token image with two channels."""

    name = "mixture"
    has_reward = False

    def __init__(self, spec):
        self.spec = spec
        self._patchifier = Patchifier(1, channels=2, scale=1.0, offset=0.0)

    def default_buckets(self):
        return [(1, 1)]

    @property
    def vocab(self):
        return 1

    @property
    def patchifier(self):
        return self._patchifier

    def sample_batch(self, rng, size, bucket=(1, 1)):
        if tuple(bucket) != (1, 1):
            raise ShapeError(f"the mixture task has a single 1x1 bucket, got {bucket}")
        points = sample_mixture(self.spec, size, rng)
        return Batch(
            tokens=np.zeros((size, 1), dtype=np.int64),
            latents=points.astype(np.float32).reshape(size, 1, 2),
            grid=(1, 1),
        )

    def points(self, latents):
        return np.asarray(latents, dtype=np.float64).reshape(-1, 2)


class GlyphTask(Task):
    """Render the prompted character."""

    name = "glyph"

    def __init__(self, spec, patch):
        self.spec = spec
        self._patchifier = Patchifier(patch)

    def default_buckets(self):
        return [(self.spec.canvas, self.spec.canvas)]

    @property
    def vocab(self):
        return len(self.spec.charset)

    @property
    def patchifier(self):
        return self._patchifier

    def _spec_for(self, bucket):
        height, width = bucket
        if height != width:
            raise ShapeError(f"glyph canvases are square, got bucket {height}x{width}")
        return self.spec.with_canvas(height)

    def sample_batch(self, rng, size, bucket):
        spec = self._spec_for(bucket)
        chars = [spec.charset[i] for i in rng.integers(len(spec.charset), size=size)]
        canvases = np.zeros((size, *bucket), dtype=np.float32)
        for i, char in enumerate(chars):
            canvases[i] = render_glyph(spec, char)
        return Batch(
            tokens=np.array([spec.token(c) for c in chars], dtype=np.int64).reshape(
                size, 1
            ),
            latents=self.patchifier.encode(canvases),
            grid=self.patchifier.grid(*bucket),
            labels=tuple(chars),
        )

    def prompts(self):
        return [
            (c, np.array([self.spec.token(c)], dtype=np.int64), None)
            for c in self.spec.charset
        ]

    def target(self, label, char=None):
        return render_glyph(self.spec, char or label)

    def reward(self, canvas, label, condition=None):
        spec = self.spec.with_canvas(np.shape(canvas)[-1])
        return glyph_reward(canvas, label, spec)


class EditTask(Task):
    """
    Apply the instructed edit to a condition glyph.  Labels are
    ``"<char>:<op>"``.
    """

    name = "edit"

    def __init__(self, spec, patch, ops=("invert", "hflip")):
        for op in ops:
            edit_token(spec, op)
        self.spec = spec
        self.ops = tuple(ops)
        self._patchifier = Patchifier(patch)

    def default_buckets(self):
        return [(self.spec.canvas, self.spec.canvas)]

    @property
    def vocab(self):
        return len(self.spec.charset) + len(EDIT_OPS)

    @property
    def patchifier(self):
        return self._patchifier

    def sample_batch(self, rng, size, bucket):
        height, width = bucket
        if height != width:
            raise ShapeError(f"glyph canvases are square, got bucket {height}x{width}")
        spec = self.spec.with_canvas(height)
        chars = rng.integers(len(spec.charset), size=size)
        ops = rng.integers(len(self.ops), size=size)
        conditions, targets, tokens, labels = [], [], [], []
        for c, o in zip(chars, ops):
            char, op = spec.charset[c], self.ops[o]
            condition, target, instruction = make_edit_pair(spec, char, op)
            conditions.append(condition)
            targets.append(target)
            tokens.append([instruction])
            labels.append(f"{char}:{op}")
        empty = np.zeros((0, height, width), dtype=np.float32)
        return Batch(
            tokens=np.array(tokens, dtype=np.int64).reshape(size, 1),
            latents=self.patchifier.encode(np.stack(targets) if targets else empty),
            grid=self.patchifier.grid(height, width),
            condition=self.patchifier.encode(
                np.stack(conditions) if conditions else empty
            ),
            labels=tuple(labels),
        )

    def prompts(self):
        prompts = []
        for char in self.spec.charset:
            for op in self.ops:
                condition, _, instruction = make_edit_pair(self.spec, char, op)
                prompts.append(
                    (f"{char}:{op}", np.array([instruction], dtype=np.int64), condition)
                )
        return prompts

    def target(self, label, char=None):
        source, op = label.split(":")
        return apply_edit(render_glyph(self.spec, char or source), op)

    def reward(self, canvas, label, condition=None):
        char, op = label.split(":")
        spec = self.spec.with_canvas(np.shape(canvas)[-1])
        _, target, _ = make_edit_pair(spec, char, op)
        reward = pixel_agreement(canvas, target)
        return float(reward) if reward.ndim == 0 else reward


def make_task(name, glyph_spec=None, mixture_spec=None, patch=2, ops=None):
    """Build the task named in a run config."""
    if name == "mixture":
        return MixtureTask(mixture_spec)
    if name == "glyph":
        return GlyphTask(glyph_spec, patch)
    if name == "edit":
        return EditTask(glyph_spec, patch, ops or ("invert", "hflip"))
    raise ValidationError(f"unknown task {name!r}")
