"""
Toy double-stream MMDiT velocity model.

Text tokens and image patch tokens keep their own projections, norms and
feed-forwards but attend jointly over ``[text, (condition), target]``.
Queries and keys pass an RMS QK-norm and then the multimodal rotary
encoding from `flowdesk.positional`.  Timestep conditioning is adaLN-style
shift/scale/gate modulation, and the output projection starts at zero so an
untrained model is the zero velocity field.

Parameters live outside the module: `init_params` returns a flat
``{name: tensor}`` dict and `forward` evaluates it with
`torch.func.functional_call` on a parameter-free skeleton.
"""

import dataclasses
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import lru_cache

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn
from torch.func import functional_call

from .exceptions import NumericError, ShapeError, ValidationError, VocabError
from .positional import RopeConfig, apply_rotary, layout_position_ids

__all__ = [
    "MAX_VOCAB",
    "Condition",
    "MMDiT",
    "ModelConfig",
    "forward",
    "gradient",
    "init_params",
    "make_oracle",
    "param_shapes",
]

logger = logging.getLogger(__name__)

MAX_VOCAB = 64
TIME_SCALE = 1000.0


@dataclass(frozen=True)
class ModelConfig:
    """
    Shape of the velocity model.

    Parameters
    ----------
    layers : int
        Number of double-stream blocks.
    heads, head_dim : int
        Attention heads and per-head width; ``hidden = heads * head_dim``.
    hidden : int or None
        Residual width.  ``None`` derives it from ``heads * head_dim``.
    ffn_mult : float
        Feed-forward expansion factor.
    patch : int
        Patch side in pixels.
    channels : int
        Pixel channels; one patch token holds ``patch**2 * channels`` values.
    vocab : int
        Prompt vocabulary size, at most `MAX_VOCAB`.
    rope : RopeConfig or None
        ``None`` uses the default axis split for ``head_dim``.
    init_std : float
        Standard deviation of the truncated-normal initialization.
    """

    layers: int = 4
    heads: int = 4
    head_dim: int = 16
    hidden: int = None
    ffn_mult: float = 4.0
    patch: int = 2
    channels: int = 1
    vocab: int = 16
    rope: RopeConfig = field(default=None)
    init_std: float = 0.02

    def __post_init__(self):
        if self.layers < 1:
            raise ValidationError(f"model.layers must be >= 1, got {self.layers}")
        if self.heads < 1:
            raise ValidationError(f"model.heads must be >= 1, got {self.heads}")
        hidden = self.heads * self.head_dim
        if self.hidden is None:
            object.__setattr__(self, "hidden", hidden)
        elif self.hidden != hidden:
            raise ValidationError(
                f"model.hidden ({self.hidden}) must equal heads * head_dim ({hidden})"
            )
        if not self.ffn_mult > 0:
            raise ValidationError(
                f"model.ffn_mult must be positive, got {self.ffn_mult}"
            )
        if self.patch < 1 or self.channels < 1:
            raise ValidationError(
                f"model.patch and model.channels must be >= 1, "
                f"got {self.patch}, {self.channels}"
            )
        if not 1 <= self.vocab <= MAX_VOCAB:
            raise ValidationError(
                f"model.vocab must lie in [1, {MAX_VOCAB}], got {self.vocab}"
            )
        if not self.init_std > 0:
            raise ValidationError(
                f"model.init_std must be positive, got {self.init_std}"
            )
        if self.rope is None:
            object.__setattr__(self, "rope", RopeConfig.for_head_dim(self.head_dim))
        elif self.rope.head_dim != self.head_dim:
            raise ValidationError(
                f"rope head_dim {self.rope.head_dim} != model head_dim {self.head_dim}"
            )
        object.__setattr__(self, "ffn_mult", float(self.ffn_mult))

    @property
    def token_dim(self):
        return self.patch * self.patch * self.channels

    @property
    def ffn_hidden(self):
        return int(round(self.hidden * self.ffn_mult))

    def replace(self, **changes):
        if "head_dim" in changes and "rope" not in changes:
            changes["rope"] = None
        if "heads" in changes or "head_dim" in changes:
            changes.setdefault("hidden", None)
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {
            "layers": self.layers,
            "heads": self.heads,
            "head_dim": self.head_dim,
            "hidden": self.hidden,
            "ffn_mult": self.ffn_mult,
            "patch": self.patch,
            "channels": self.channels,
            "vocab": self.vocab,
            "rope": self.rope.to_dict(),
            "init_std": self.init_std,
        }

    @classmethod
    def from_dict(cls, d):
        rope = d.get("rope")
        return cls(
            layers=int(d["layers"]),
            heads=int(d["heads"]),
            head_dim=int(d["head_dim"]),
            hidden=int(d["hidden"]) if d.get("hidden") is not None else None,
            ffn_mult=float(d["ffn_mult"]),
            patch=int(d["patch"]),
            channels=int(d["channels"]),
            vocab=int(d["vocab"]),
            rope=RopeConfig.from_dict(rope) if rope else None,
            init_std=float(d.get("init_std", 0.02)),
        )

    @classmethod
    def from_section(cls, section, **derived):
        """
        Build from the ``[model]`` section of a validated run config.

        Fields left as None in the section take their value from ``derived``
        (the task supplies ``patch``, ``channels`` and ``vocab``) or from the
        dataclass defaults.
        """
        values = {
            key: section[key]
            for key in ("layers", "heads", "head_dim", "hidden", "ffn_mult", "patch")
            + ("channels", "vocab", "init_std")
            if section.get(key) is not None
        }
        for key, value in derived.items():
            values.setdefault(key, value)
        head_dim = int(values.get("head_dim", 16))
        rope_section = section.get("rope") or {}
        base = float(rope_section.get("base") or 10000.0)
        # An empty axis_split selects the default split for head_dim.
        split = rope_section.get("axis_split")
        if split:
            values["rope"] = RopeConfig(head_dim, tuple(int(n) for n in split), base)
        else:
            values["rope"] = RopeConfig.for_head_dim(head_dim, base)
        return cls(**values)


@dataclass(frozen=True, eq=False)
class Condition:
    """
    Everything the velocity oracle conditions on besides ``(x, t)``.

    Parameters
    ----------
    tokens : torch.Tensor
        ``(B, L)`` prompt ids.
    grid : tuple of int
        Token grid ``(rows, cols)`` of the image latents.
    image : torch.Tensor or None
        ``(B, rows * cols, token_dim)`` clean condition-image latent.
    frames : tuple of int
        Frame ids of the condition and target images.
    """

    tokens: torch.Tensor
    grid: tuple
    image: torch.Tensor = None
    frames: tuple = (0, 1)

    def repeat(self, n):
        """The same condition for a batch of ``n`` (batch size 1 only)."""
        image = None if self.image is None else self.image.expand(n, -1, -1)
        return Condition(self.tokens.expand(n, -1), self.grid, image, self.frames)

    def swap_frames(self):
        return Condition(self.tokens, self.grid, self.image, self.frames[::-1])


class RMSNorm(nn.Module):
    def __init__(self, dim, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        rms = torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        return self.weight * x * rms


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal embedding of ``t * TIME_SCALE``, shape ``(B, dim)``."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period)
        * torch.arange(half, dtype=t.dtype, device=t.device)
        / half
    )
    args = (t * TIME_SCALE)[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class StreamLayers(nn.Module):
    """Projections, norms and feed-forward owned by one modality."""

    def __init__(self, config):
        super().__init__()
        hidden = config.hidden
        self.modulation = nn.Linear(hidden, 6 * hidden)
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.q_norm = RMSNorm(config.head_dim)
        self.k_norm = RMSNorm(config.head_dim)
        self.proj = nn.Linear(hidden, hidden)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(hidden, config.ffn_hidden),
            nn.GELU(approximate="tanh"),
            nn.Linear(config.ffn_hidden, hidden),
        )

    def attention_inputs(self, x, shift, scale, heads):
        qkv = self.qkv(modulate(self.norm1(x), shift, scale))
        q, k, v = rearrange(qkv, "b n (three h d) -> three b h n d", three=3, h=heads)
        return self.q_norm(q), self.k_norm(k), v


class DoubleStreamBlock(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        self.text = StreamLayers(config)
        self.image = StreamLayers(config)

    def forward(self, txt, img, c, ids):
        heads = self.config.heads
        t_mod = self.text.modulation(F.silu(c)).chunk(6, dim=-1)
        i_mod = self.image.modulation(F.silu(c)).chunk(6, dim=-1)

        tq, tk, tv = self.text.attention_inputs(txt, t_mod[0], t_mod[1], heads)
        iq, ik, iv = self.image.attention_inputs(img, i_mod[0], i_mod[1], heads)
        q = apply_rotary(torch.cat([tq, iq], dim=2), ids, self.config.rope)
        k = apply_rotary(torch.cat([tk, ik], dim=2), ids, self.config.rope)
        v = torch.cat([tv, iv], dim=2)

        scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
        weights = torch.softmax(scores, dim=-1)
        out = rearrange(weights @ v, "b h n d -> b n (h d)")
        t_out, i_out = out[:, : txt.shape[1]], out[:, txt.shape[1] :]

        txt = txt + t_mod[2][:, None] * self.text.proj(t_out)
        txt = txt + t_mod[5][:, None] * self.text.mlp(
            modulate(self.text.norm2(txt), t_mod[3], t_mod[4])
        )
        img = img + i_mod[2][:, None] * self.image.proj(i_out)
        img = img + i_mod[5][:, None] * self.image.mlp(
            modulate(self.image.norm2(img), i_mod[3], i_mod[4])
        )
        return txt, img


class MMDiT(nn.Module):
    """
    Double-stream diffusion transformer predicting the velocity of the
    target-image tokens.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        hidden = config.hidden
        self.text_embed = nn.Embedding(config.vocab, hidden)
        self.image_in = nn.Linear(config.token_dim, hidden)
        self.time_mlp = nn.Sequential(
            nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden)
        )
        self.blocks = nn.ModuleList(
            DoubleStreamBlock(config) for _ in range(config.layers)
        )
        self.final_norm = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.final_modulation = nn.Linear(hidden, 2 * hidden)
        self.out = nn.Linear(hidden, config.token_dim)

    def forward(self, prompt_tokens, image_latent, t, condition_latent, ids):
        txt = self.text_embed(prompt_tokens)
        c = self.time_mlp(timestep_embedding(t, self.config.hidden)) + txt.mean(dim=1)

        n_target = image_latent.shape[1]
        img = self.image_in(image_latent)
        if condition_latent is not None:
            img = torch.cat([self.image_in(condition_latent), img], dim=1)

        for block in self.blocks:
            txt, img = block(txt, img, c, ids)

        shift, scale = self.final_modulation(F.silu(c)).chunk(2, dim=-1)
        img = modulate(self.final_norm(img[:, -n_target:]), shift, scale)
        return self.out(img)


@lru_cache(maxsize=8)
def _skeleton(config):
    with torch.device("meta"):
        return MMDiT(config)


def init_params(config, seed, dtype=torch.float32, std=None):
    """
    Initial parameters as an ordered ``{name: tensor}`` dict.

    Weights are truncated-normal (``std`` defaults to ``config.init_std``,
    cut at two standard deviations), biases zero, RMS-norm gains one and
    the output projection exactly zero.  ``std`` overrides the output
    projection too, for gradient checks that need every path alive.
    """
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    zero_out = std is None
    std = config.init_std if std is None else std
    params = OrderedDict()
    for name, meta in _skeleton(config).named_parameters():
        tensor = torch.empty(meta.shape, dtype=torch.float64)
        if name.endswith("norm.weight"):
            tensor.fill_(1.0)
        elif zero_out and name.startswith("out."):
            tensor.zero_()
        elif name.endswith(".bias") and zero_out:
            tensor.zero_()
        else:
            nn.init.trunc_normal_(tensor, std=std, a=-2 * std, b=2 * std, generator=gen)
        params[name] = tensor.to(dtype)
    logger.debug(
        "Initialized %d parameter tensors (%d values) with seed %d",
        len(params),
        sum(p.numel() for p in params.values()),
        seed,
    )
    return params


def _as_time(t, batch, dtype):
    t = torch.as_tensor(t, dtype=dtype)
    if t.ndim == 0:
        return t.expand(batch)
    if t.shape != (batch,):
        raise ShapeError(f"{tuple(t.shape)} timesteps for a batch of {batch}")
    return t


def forward(
    params,
    config,
    prompt_tokens,
    image_latent,
    t,
    condition_latent=None,
    grid=None,
    frames=(0, 1),
    position_ids=None,
):
    """
    Evaluate the velocity model.

    Parameters
    ----------
    params : dict of str to torch.Tensor
    config : ModelConfig
    prompt_tokens : torch.Tensor
        ``(B, L)`` integer ids below ``config.vocab``.
    image_latent : torch.Tensor
        ``(B, rows * cols, token_dim)`` noised target tokens.
    t : float or torch.Tensor
        Scalar or one time per batch element.
    condition_latent : torch.Tensor, optional
        Clean condition-image tokens, same shape as ``image_latent``.
    grid : tuple of int, optional
        Token grid ``(rows, cols)``; defaults to a square grid.
    frames : tuple of int
        Frame ids of the condition and target images.
    position_ids : torch.Tensor, optional
        Explicit ``(n, 3)`` ids for the whole joint sequence.

    Returns
    -------
    torch.Tensor
        Velocity with the shape of ``image_latent``.
    """
    prompt_tokens = torch.as_tensor(prompt_tokens)
    if image_latent.ndim != 3 or image_latent.shape[-1] != config.token_dim:
        raise ShapeError(
            f"image latent must be (B, N, {config.token_dim}), "
            f"got {tuple(image_latent.shape)}"
        )
    batch, n_tokens = image_latent.shape[:2]
    if grid is None:
        side = math.isqrt(n_tokens)
        grid = (side, side)
    rows, cols = grid
    if rows * cols != n_tokens:
        raise ShapeError(
            f"{n_tokens} image tokens do not fill a {rows}x{cols} grid"
        )
    if prompt_tokens.ndim != 2 or prompt_tokens.shape[0] != batch:
        raise ShapeError(
            f"prompt tokens must be (B={batch}, L), got {tuple(prompt_tokens.shape)}"
        )
    if prompt_tokens.numel() and (
        int(prompt_tokens.min()) < 0 or int(prompt_tokens.max()) >= config.vocab
    ):
        raise VocabError(
            f"prompt token ids must lie in [0, {config.vocab}), "
            f"got range [{int(prompt_tokens.min())}, {int(prompt_tokens.max())}]"
        )
    if condition_latent is not None and condition_latent.shape != image_latent.shape:
        raise ShapeError(
            f"condition latent {tuple(condition_latent.shape)} and image latent "
            f"{tuple(image_latent.shape)} differ in shape"
        )

    if position_ids is None:
        position_ids = layout_position_ids(
            prompt_tokens.shape[1],
            rows,
            cols,
            conditioned=condition_latent is not None,
            frames=tuple(frames),
        )
    t = _as_time(t, batch, image_latent.dtype)
    return functional_call(
        _skeleton(config),
        params,
        (
            prompt_tokens.to(torch.int64),
            image_latent,
            t,
            condition_latent,
            position_ids,
        ),
    )


def make_oracle(params, config):
    """
    Wrap parameters as a velocity oracle ``oracle(x, t, condition)`` for the
    samplers and preference losses.
    """

    def oracle(x, t, condition):
        return forward(
            params,
            config,
            condition.tokens,
            x,
            t,
            condition_latent=condition.image,
            grid=condition.grid,
            frames=condition.frames,
        )

    return oracle


def gradient(params, loss_closure):
    """
    Gradient of a scalar loss with respect to every parameter.

    Parameters
    ----------
    params : dict of str to torch.Tensor
    loss_closure : callable
        ``loss_closure(params) -> scalar``; called once with leaf tensors
        that track gradients.

    Returns
    -------
    loss : torch.Tensor
        The detached loss value.
    grads : OrderedDict
        One tensor per parameter; parameters the loss does not depend on
        get zeros.

    Raises
    ------
    NumericError
        If the loss is not finite.
    """
    leaves = OrderedDict(
        (name, p.detach().requires_grad_(True)) for name, p in params.items()
    )
    loss = torch.as_tensor(loss_closure(leaves))
    if loss.numel() != 1:
        raise ShapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss).all():
        raise NumericError(f"loss is not finite: {float(loss)}")
    if not loss.requires_grad:
        grads = [None] * len(leaves)
    else:
        grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    return loss.detach(), OrderedDict(
        (name, torch.zeros_like(p) if g is None else g)
        for (name, p), g in zip(leaves.items(), grads)
    )


def param_shapes(config):
    """``{name: shape}`` of every parameter of a model with ``config``."""
    return OrderedDict(
        (name, tuple(p.shape)) for name, p in _skeleton(config).named_parameters()
    )
