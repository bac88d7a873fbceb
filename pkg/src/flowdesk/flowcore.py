"""
Rectified-flow interpolant, timestep sampling and the flow-matching loss.

Time runs from noise (``t = 0``) to data (``t = 1``)::

    x_t = t * x0 + (1 - t) * x1
    v_t = x0 - x1
"""

from dataclasses import dataclass

import torch

from .exceptions import DomainError, ShapeError, ValidationError

__all__ = [
    "SDE_TIME_FLOOR",
    "FlowSample",
    "TimestepDist",
    "clamp_time",
    "expand_time",
    "fm_loss",
    "interpolate",
    "sample_timestep",
]

# Time floor for code paths that feed t into the 1/(2t) SDE drift.
SDE_TIME_FLOOR = 1e-3

_ONE_BELOW = 1.0 - 2.0**-53


@dataclass(frozen=True)
class TimestepDist:
    """
    Logit-normal timestep distribution: ``t = sigmoid(z)``,
    ``z ~ Normal(loc, scale**2)``.
    """

    loc: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError(f"timestep scale must be positive, got {self.scale}")

    @classmethod
    def from_section(cls, section):
        return cls(loc=float(section["loc"]), scale=float(section["scale"]))


@dataclass(frozen=True)
class FlowSample:
    x0: torch.Tensor
    x1: torch.Tensor
    t: object
    x_t: torch.Tensor
    v_t: torch.Tensor


def sample_timestep(dist, rng, size=None, dtype=torch.float64):
    """
    Draw logit-normal timesteps.

    Parameters
    ----------
    dist : TimestepDist
    rng : torch.Generator
        Explicit random source; never a global one.
    size : int or None
        ``None`` returns a Python float, otherwise a tensor of ``size`` draws.

    Returns
    -------
    float or torch.Tensor
        Values strictly inside ``(0, 1)``.
    """
    n = 1 if size is None else size
    z = torch.randn(n, generator=rng, dtype=torch.float64)
    t = torch.sigmoid(dist.loc + dist.scale * z)
    t = t.clamp(min=torch.finfo(torch.float64).tiny, max=_ONE_BELOW)
    if size is None:
        return float(t[0])
    return t.to(dtype)


def clamp_time(t, eps=SDE_TIME_FLOOR):
    """Clamp ``t`` into ``[eps, 1 - eps]``."""
    if isinstance(t, torch.Tensor):
        return t.clamp(eps, 1.0 - eps)
    return min(max(float(t), eps), 1.0 - eps)


def expand_time(t, like):
    """
    Broadcast a scalar or per-batch time against a latent.

    A 1-D tensor with one entry per leading batch element of ``like`` is
    reshaped to ``(B, 1, ..., 1)``; scalars are returned unchanged.
    """
    if isinstance(t, torch.Tensor) and t.ndim == 1 and like.ndim > 1:
        if t.shape[0] != like.shape[0]:
            raise ShapeError(
                f"{t.shape[0]} timesteps for a batch of {like.shape[0]} latents"
            )
        return t.to(like.dtype).view(-1, *([1] * (like.ndim - 1)))
    return t


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def interpolate(x0, x1, t):
    """
    Build the straight-line interpolant between data ``x0`` and noise ``x1``.

    Parameters
    ----------
    x0, x1 : torch.Tensor
        Data and noise latents of identical shape.
    t : float or torch.Tensor
        Time in ``[0, 1]``; a 1-D tensor gives one time per batch element.

    Returns
    -------
    FlowSample
    """
    _check_same_shape(x0, x1, "interpolate")
    t_min, t_max = (
        (float(t.min()), float(t.max())) if isinstance(t, torch.Tensor) else (t, t)
    )
    if t_min < 0.0 or t_max > 1.0:
        raise DomainError(f"interpolation time must lie in [0, 1], got {t}")
    tb = expand_time(t, x0)
    x_t = tb * x0 + (1 - tb) * x1
    return FlowSample(x0=x0, x1=x1, t=t, x_t=x_t, v_t=x0 - x1)


def fm_loss(v_pred, v_target):
    """
    Flow-matching loss: mean over all elements of ``(v_pred - v_target)**2``.
    """
    _check_same_shape(v_pred, v_target, "fm_loss")
    return torch.mean((v_pred - v_target) ** 2)
