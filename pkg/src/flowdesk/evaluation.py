"""
Paired sampling and reward evaluation.

Two policies evaluated with the same prompts and seeds start every sample
from the same initial noise (and, in ``sde`` mode, see the same per-step
noises), so their reward differences are paired comparisons.
"""

import logging

import numpy as np
import torch

from .exceptions import ValidationError
from .net import Condition
from .sampler import ode_rollout, sample_trajectory, trajectory_generator

__all__ = [
    "SAMPLE_MODES",
    "evaluate_rewards",
    "generate",
    "prompt_condition",
    "summarize_rewards",
]

logger = logging.getLogger(__name__)

SAMPLE_MODES = ("ode", "sde")


def prompt_condition(task, prompt, dtype=torch.float32, frames=(0, 1)):
    """Batch-1 `Condition` for a ``(label, tokens, condition canvas)`` prompt."""
    _, tokens, canvas = prompt
    height, width = task.default_buckets()[0]
    image = None
    if canvas is not None:
        height, width = np.shape(canvas)[:2]
        image = torch.from_numpy(task.patchifier.encode(canvas[None])).to(dtype)
    return Condition(
        tokens=torch.as_tensor(np.asarray(tokens, dtype=np.int64)).reshape(1, -1),
        grid=task.patchifier.grid(height, width),
        image=image,
        frames=tuple(frames),
    )


def generate(
    oracle,
    task,
    prompt,
    seeds,
    schedule,
    mode="ode",
    dtype=torch.float32,
    frames=(0, 1),
):
    """
    Sample one output per seed for ``prompt``.

    Returns
    -------
    numpy.ndarray
        Decoded canvases, ``(len(seeds), H, W)`` for single-channel tasks or
        ``(len(seeds), H, W, C)`` otherwise.
    """
    if mode not in SAMPLE_MODES:
        raise ValidationError(
            f"sample mode must be one of {SAMPLE_MODES}, got {mode!r}"
        )
    condition = prompt_condition(task, prompt, dtype, frames)
    rows, cols = condition.grid
    shape = (1, rows * cols, task.patchifier.token_dim)
    finals = []
    for seed in seeds:
        gen = trajectory_generator(int(seed), 0)
        if mode == "sde":
            final = sample_trajectory(
                oracle, condition, shape, schedule, gen, dtype
            ).final
        else:
            final = ode_rollout(oracle, condition, shape, schedule, gen, dtype)[-1]
        finals.append(final[0].detach().cpu().numpy())
    latents = np.stack(finals) if finals else np.zeros((0, *shape[1:]), np.float32)
    return task.patchifier.decode(latents, condition.grid)


def evaluate_rewards(oracle, task, prompts, seeds, schedule, mode="ode", frames=(0, 1)):
    """
    Reward of every ``(prompt, seed)`` sample.

    Returns
    -------
    numpy.ndarray
        ``(len(prompts), len(seeds))`` float64 rewards.
    """
    if not task.has_reward:
        raise ValidationError(f"task {task.name!r} defines no reward")
    rewards = np.zeros((len(prompts), len(seeds)), dtype=np.float64)
    for i, prompt in enumerate(prompts):
        label, _, condition = prompt
        canvases = generate(oracle, task, prompt, seeds, schedule, mode, frames=frames)
        for j, canvas in enumerate(canvases):
            rewards[i, j] = task.reward(canvas, label, condition)
    logger.debug(
        "Evaluated %d prompts x %d seeds, mean reward %.4f",
        len(prompts),
        len(seeds),
        rewards.mean() if rewards.size else float("nan"),
    )
    return rewards


def summarize_rewards(rewards):
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        return {"count": 0, "mean": None, "std": None}
    return {
        "count": int(rewards.size),
        "mean": float(rewards.mean()),
        "std": float(rewards.std()),
    }
