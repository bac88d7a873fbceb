"""
Training objectives as functions of a parameter dict.

Each objective takes its random draws (timesteps, noises, trajectories) as
inputs, so evaluating it twice at the same parameters gives the same value;
the trainers and `flowdesk.gradcheck` both rely on that.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import ShapeError
from .flowcore import fm_loss, interpolate, sample_timestep
from .net import Condition, make_oracle
from .preference import dpo_terms, grpo_objective
from .sampler import step_kl, transition_logprob

__all__ = [
    "FlowDraw",
    "batch_condition",
    "draw_flow",
    "dpo_objective",
    "flow_matching_objective",
    "grpo_terms",
    "trajectory_terms",
]


@dataclass(frozen=True, eq=False)
class FlowDraw:
    """Per-example timesteps and noise for one flow-matching evaluation."""

    t: torch.Tensor
    noise: torch.Tensor


def as_tensor(array, dtype):
    if isinstance(array, torch.Tensor):
        return array.to(dtype)
    return torch.from_numpy(np.ascontiguousarray(array)).to(dtype)


def batch_condition(batch, dtype=torch.float32, frames=(0, 1)):
    """`Condition` for a `flowdesk.tasks.Batch`."""
    image = None if batch.condition is None else as_tensor(batch.condition, dtype)
    return Condition(
        tokens=torch.from_numpy(np.asarray(batch.tokens, dtype=np.int64)),
        grid=tuple(batch.grid),
        image=image,
        frames=tuple(frames),
    )


def draw_flow(dist, shape, gen, dtype=torch.float32):
    """
    Draw ``shape[0]`` logit-normal timesteps, then a noise tensor of
    ``shape``, from ``gen``.
    """
    t = sample_timestep(dist, gen, size=shape[0], dtype=dtype)
    noise = torch.randn(shape, generator=gen, dtype=dtype)
    return FlowDraw(t, noise)


def flow_matching_objective(params, config, x0, condition, draw):
    """Mean squared velocity error on ``x_t`` built from ``x0`` and ``draw``."""
    sample = interpolate(x0, draw.noise, draw.t)
    v_pred = make_oracle(params, config)(sample.x_t, draw.t, condition)
    return fm_loss(v_pred, sample.v_t)


def dpo_objective(params, ref_params, config, pair, t, noise_win, noise_lose, beta):
    """DPO terms with ``params`` as the policy and ``ref_params`` frozen."""
    return dpo_terms(
        make_oracle(params, config),
        make_oracle(ref_params, config),
        pair,
        t,
        noise_win,
        noise_lose,
        beta,
    )


def trajectory_terms(oracle, trajectories, condition, schedule, ref_oracle=None):
    """
    Re-evaluate recorded trajectories under ``oracle``.

    Parameters
    ----------
    oracle : callable
        Velocity oracle being optimized.
    trajectories : list of flowdesk.sampler.Trajectory
        ``G`` trajectories with batch-1 states, all on the same time grid.
    condition : Condition
        Batch-1 condition shared by the group.
    schedule : flowdesk.sampler.NoiseSchedule
    ref_oracle : callable, optional
        Frozen reference for the per-step KL terms.

    Returns
    -------
    logprobs : torch.Tensor
        ``(G, T)`` transition log-densities under ``oracle``.
    kl : torch.Tensor or None
        ``(G, T)`` per-step KL to the reference.
    """
    size = len(trajectories)
    steps = trajectories[0].steps
    if any(tr.steps != steps for tr in trajectories):
        raise ShapeError("trajectories of a group must have the same number of steps")
    group_condition = condition.repeat(size)
    dt = schedule.dt
    logprobs, kls = [], []
    for k in range(steps):
        t = trajectories[0].times[k]
        sigma = schedule.sigma_of_t(t)
        x = torch.cat([tr.states[k] for tr in trajectories])
        x_next = torch.cat([tr.states[k + 1] for tr in trajectories])
        v = oracle(x, t, group_condition)
        logprobs.append(
            transition_logprob(
                x_next, x, v, t, dt, sigma, eps=schedule.eps, batched=True
            )
        )
        if ref_oracle is not None:
            with torch.no_grad():
                v_ref = ref_oracle(x, t, group_condition)
            kls.append(step_kl(v, v_ref, t, dt, sigma, eps=schedule.eps, batched=True))
    logprobs = torch.stack(logprobs, dim=1)
    kl = torch.stack(kls, dim=1) if ref_oracle is not None else None
    return logprobs, kl


def grpo_terms(params, ref_params, config, group, old_logprobs, schedule, rl):
    """
    GRPO objective of one group at ``params``.

    ``old_logprobs`` are the ``(G, T)`` log-densities recorded when the group
    was sampled.
    """
    new_logprobs, kl = trajectory_terms(
        make_oracle(params, config),
        group.trajectories,
        group.condition,
        schedule,
        ref_oracle=make_oracle(ref_params, config),
    )
    return grpo_objective(group, new_logprobs, old_logprobs, kl, rl)
