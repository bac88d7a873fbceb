"""
Preference optimization on top of the flow-matching model: DPO on
flow-matching residuals and group-relative policy optimization (GRPO) over
SDE trajectories.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import DomainError, GroupSizeError, ShapeError, ValidationError
from .flowcore import interpolate

__all__ = [
    "DpoTerms",
    "Group",
    "GrpoTerms",
    "PreferencePair",
    "RLConfig",
    "clipped_surrogate",
    "dpo_loss",
    "dpo_terms",
    "group_advantages",
    "grpo_objective",
]

ZERO_SPREAD = 1e-12


@dataclass(frozen=True)
class RLConfig:
    beta_dpo: float = 1.0
    beta_kl: float = 0.01
    clip_eps: float = 0.2
    group_size: int = 8
    inner_epochs: int = 1
    prompts_per_iteration: int = 2

    def __post_init__(self):
        if not self.beta_dpo > 0:
            raise ValidationError(f"rl.beta_dpo must be positive, got {self.beta_dpo}")
        if self.beta_kl < 0:
            raise ValidationError(f"rl.beta_kl must be >= 0, got {self.beta_kl}")
        if not 0 < self.clip_eps < 1:
            raise ValidationError(
                f"rl.clip_eps must lie in (0, 1), got {self.clip_eps}"
            )
        if self.group_size < 2:
            raise ValidationError(f"rl.group_size must be >= 2, got {self.group_size}")
        if self.inner_epochs < 1:
            raise ValidationError(
                f"rl.inner_epochs must be >= 1, got {self.inner_epochs}"
            )
        if self.prompts_per_iteration < 1:
            raise ValidationError(
                "rl.prompts_per_iteration must be >= 1, "
                f"got {self.prompts_per_iteration}"
            )

    @classmethod
    def from_section(cls, section):
        return cls(
            beta_dpo=float(section["beta_dpo"]),
            beta_kl=float(section["beta_kl"]),
            clip_eps=float(section["clip_eps"]),
            group_size=int(section["group_size"]),
            inner_epochs=int(section["inner_epochs"]),
            prompts_per_iteration=int(section["prompts_per_iteration"]),
        )


@dataclass(frozen=True)
class PreferencePair:
    """
    A conditioned (win, lose) pair.  ``win`` and ``lose`` carry a leading
    batch dimension; squared errors are summed over the rest.
    """

    condition: object
    win: torch.Tensor
    lose: torch.Tensor

    def __post_init__(self):
        if self.win.shape != self.lose.shape:
            raise ShapeError(
                f"win {tuple(self.win.shape)} and lose {tuple(self.lose.shape)} "
                "latents differ in shape"
            )


@dataclass
class Group:
    """
    ``G`` trajectories sampled for one condition, with their rewards and
    standardized advantages.
    """

    condition: object
    trajectories: list
    rewards: list
    advantages: list = field(default=None)

    def __post_init__(self):
        if len(self.rewards) < 2:
            raise GroupSizeError(
                f"a group needs at least 2 members, got {len(self.rewards)}"
            )
        if len(self.trajectories) != len(self.rewards):
            raise ShapeError(
                f"{len(self.trajectories)} trajectories but {len(self.rewards)} rewards"
            )
        if self.advantages is None:
            self.advantages = group_advantages(self.rewards)
        elif len(self.advantages) != len(self.rewards):
            raise ShapeError(
                f"{len(self.advantages)} advantages but {len(self.rewards)} rewards"
            )

    @property
    def size(self):
        return len(self.rewards)


class DpoTerms(NamedTuple):
    loss: torch.Tensor
    diff_policy: torch.Tensor
    diff_ref: torch.Tensor

    @property
    def margin(self):
        """Implicit margin ``Diff_ref - Diff_policy`` per pair."""
        return self.diff_ref - self.diff_policy


class GrpoTerms(NamedTuple):
    objective: torch.Tensor
    loss: torch.Tensor
    clip_fraction: float
    mean_kl: float


def _squared_error(pred, target):
    return ((pred - target) ** 2).flatten(1).sum(dim=1)


def dpo_terms(policy, reference, pair, t, noise_win, noise_lose, beta):
    """
    Evaluate the flow-matching DPO objective for a batch of pairs.

    Both branches share ``t`` and use their own noise.  With
    ``Diff = ||v(x_t^win) - v_t^win||^2 - ||v(x_t^lose) - v_t^lose||^2``
    the loss is ``-log sigmoid(-beta * (Diff_policy - Diff_ref))`` averaged
    over the batch.  The reference is evaluated without gradient.

    Returns
    -------
    DpoTerms
    """
    t_min = float(t.min()) if isinstance(t, torch.Tensor) else float(t)
    t_max = float(t.max()) if isinstance(t, torch.Tensor) else float(t)
    if not (0.0 < t_min and t_max < 1.0):
        raise DomainError(f"DPO time must lie in (0, 1), got {t}")
    if noise_win.shape != pair.win.shape or noise_lose.shape != pair.lose.shape:
        raise ShapeError("DPO noise shapes must match the pair latents")

    win = interpolate(pair.win, noise_win, t)
    lose = interpolate(pair.lose, noise_lose, t)

    diff_policy = _squared_error(
        policy(win.x_t, t, pair.condition), win.v_t
    ) - _squared_error(policy(lose.x_t, t, pair.condition), lose.v_t)
    with torch.no_grad():
        diff_ref = _squared_error(
            reference(win.x_t, t, pair.condition), win.v_t
        ) - _squared_error(reference(lose.x_t, t, pair.condition), lose.v_t)

    loss = -F.logsigmoid(-beta * (diff_policy - diff_ref)).mean()
    return DpoTerms(loss, diff_policy, diff_ref)


def dpo_loss(policy, reference, pair, t, noise_win, noise_lose, beta):
    """Scalar DPO loss; see `dpo_terms`."""
    return dpo_terms(policy, reference, pair, t, noise_win, noise_lose, beta).loss


def group_advantages(rewards):
    """
    Standardize rewards within a group with the population standard
    deviation.  A group whose spread is below 1e-12 gets all-zero advantages.

    Returns
    -------
    numpy.ndarray of float64
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or rewards.size < 2:
        raise GroupSizeError(f"a group needs at least 2 rewards, got {rewards.size}")
    std = rewards.std()
    if std < ZERO_SPREAD:
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / std


def clipped_surrogate(ratio, advantages, clip_eps):
    """``min(r * A, clip(r, 1 - eps, 1 + eps) * A)`` element-wise."""
    unclipped = ratio * advantages
    clipped = ratio.clamp(1 - clip_eps, 1 + clip_eps) * advantages
    return torch.minimum(unclipped, clipped)


def grpo_objective(group, new_logprobs, old_logprobs, kl_terms, config):
    """
    Clipped GRPO objective over a group.

    Parameters
    ----------
    group : Group
    new_logprobs, old_logprobs, kl_terms : torch.Tensor
        Shape ``(G, T)``.
    config : RLConfig

    Returns
    -------
    GrpoTerms
        ``objective`` is the quantity to maximize and ``loss`` its negation.
    """
    new_logprobs = torch.as_tensor(new_logprobs)
    old_logprobs = torch.as_tensor(old_logprobs, dtype=new_logprobs.dtype)
    kl_terms = torch.as_tensor(kl_terms, dtype=new_logprobs.dtype)
    if new_logprobs.ndim != 2:
        raise ShapeError(
            f"log-probabilities must be (G, T), got {tuple(new_logprobs.shape)}"
        )
    if old_logprobs.shape != new_logprobs.shape or kl_terms.shape != new_logprobs.shape:
        raise ShapeError(
            "new/old log-probabilities and KL terms must share one (G, T) shape, got "
            f"{tuple(new_logprobs.shape)}, {tuple(old_logprobs.shape)}, "
            f"{tuple(kl_terms.shape)}"
        )
    if new_logprobs.shape[0] != group.size:
        raise ShapeError(
            f"{new_logprobs.shape[0]} rows of log-probabilities for a group of "
            f"{group.size}"
        )

    advantages = torch.as_tensor(
        np.asarray(group.advantages), dtype=new_logprobs.dtype
    ).unsqueeze(1)
    ratio = torch.exp(new_logprobs - old_logprobs)
    surrogate = clipped_surrogate(ratio, advantages, config.clip_eps)
    objective = (surrogate - config.beta_kl * kl_terms).mean()

    with torch.no_grad():
        clipped = ratio.clamp(1 - config.clip_eps, 1 + config.clip_eps) * advantages
        clip_fraction = float((clipped < ratio * advantages).to(torch.float64).mean())
        mean_kl = float(kl_terms.mean())
    return GrpoTerms(objective, -objective, clip_fraction, mean_kl)
