"""
Finite-difference check of the analytic gradients of the training losses.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import GradientCheckError
from .net import gradient, init_params, make_oracle
from .objectives import (
    batch_condition,
    draw_flow,
    dpo_objective,
    flow_matching_objective,
    grpo_terms,
    trajectory_terms,
)
from .pipeline import payload_rng
from .preference import Group, PreferencePair
from .sampler import sample_group

__all__ = [
    "DEFAULT_ENTRIES",
    "DEFAULT_STEP",
    "DEFAULT_THRESHOLD",
    "CheckResult",
    "check_gradients",
    "corrupt_gradient",
    "gradcheck_losses",
    "run_gradcheck",
]

logger = logging.getLogger(__name__)

DEFAULT_ENTRIES = 100
DEFAULT_STEP = 1e-5
DEFAULT_THRESHOLD = 1e-4
RELATIVE_FLOOR = 1e-5
CHECK_INIT_STD = 0.2


@dataclass
class CheckResult:
    max_rel_error: float
    entries: int
    threshold: float
    worst: str

    @property
    def passed(self):
        return self.max_rel_error < self.threshold

    def to_dict(self):
        return {
            "max_rel_error": (
                self.max_rel_error if math.isfinite(self.max_rel_error) else None
            ),
            "entries": self.entries,
            "threshold": self.threshold,
            "worst": self.worst,
            "passed": self.passed,
        }


def corrupt_gradient(scale=1.5, name=None):
    """
    Test hook: scale the analytic gradient of parameter ``name`` (of every
    parameter by default) so that the check must fail.
    """

    def corrupt(grads):
        for key in grads if name is None else [name]:
            grads[key] = grads[key] * scale
        return grads

    return corrupt


def _choose_entries(params, n_entries, rng):
    names = list(params)
    sizes = np.array([params[n].numel() for n in names])
    total = int(sizes.sum())
    flat = rng.choice(total, size=min(n_entries, total), replace=False)
    bounds = np.cumsum(sizes)
    entries = []
    for index in np.sort(flat):
        which = int(np.searchsorted(bounds, index, side="right"))
        start = bounds[which - 1] if which else 0
        entries.append((names[which], int(index - start)))
    return entries


def check_gradients(
    loss_fn,
    params,
    n_entries=DEFAULT_ENTRIES,
    step=DEFAULT_STEP,
    seed=0,
    threshold=DEFAULT_THRESHOLD,
    corrupt=None,
):
    """
    Compare autograd against central differences on random entries.

    Parameters
    ----------
    loss_fn : callable
        Deterministic ``loss_fn(params) -> scalar tensor``.
    params : dict of str to torch.Tensor
        Float64 parameters.
    n_entries : int
        Scalar entries to check, drawn without replacement over all
        parameters.
    step : float
        Central-difference step.
    corrupt : callable, optional
        Applied to the analytic gradient dict before comparison.

    Returns
    -------
    CheckResult
        The relative error of an entry is
        ``|a - n| / max(|a|, |n|, 1e-5)``.
    """
    _, grads = gradient(params, loss_fn)
    if corrupt is not None:
        grads = corrupt(grads)

    worst, worst_err = "", 0.0
    entries = _choose_entries(params, n_entries, np.random.default_rng(seed))
    with torch.no_grad():
        for name, index in entries:
            shifted = dict(params)
            base = params[name].detach().clone()
            flat = base.view(-1)
            original = float(flat[index])

            flat[index] = original + step
            shifted[name] = base
            plus = float(loss_fn(shifted))
            flat[index] = original - step
            minus = float(loss_fn(shifted))

            numeric = (plus - minus) / (2 * step)
            analytic = float(grads[name].reshape(-1)[index])
            scale = max(abs(analytic), abs(numeric), RELATIVE_FLOOR)
            err = abs(analytic - numeric) / scale
            if not math.isfinite(err):
                err = math.inf
            if err >= worst_err:
                worst, worst_err = f"{name}[{index}]", err
    return CheckResult(worst_err, len(entries), threshold, worst)


def gradcheck_losses(
    task, config, schedule, rl, timestep, seed, batch_size=2, group_size=2
):
    """
    Build deterministic FM, DPO and GRPO loss closures on a float64 copy of
    the toy model.

    Returns
    -------
    params : OrderedDict
    losses : dict of str to callable
    """
    dtype = torch.float64
    params = init_params(config, seed, dtype=dtype, std=CHECK_INIT_STD)
    ref_params = init_params(config, seed + 1, dtype=dtype, std=CHECK_INIT_STD)
    gen = torch.Generator()
    gen.manual_seed(seed)

    bucket = task.default_buckets()[0]
    batch = task.sample_batch(payload_rng(seed, 0), batch_size, bucket)
    other = task.sample_batch(payload_rng(seed, 1), batch_size, bucket)
    condition = batch_condition(batch, dtype)
    x0 = torch.from_numpy(batch.latents).to(dtype)

    fm_draw = draw_flow(timestep, x0.shape, gen, dtype)

    pair = PreferencePair(condition, x0, torch.from_numpy(other.latents).to(dtype))
    dpo_t = draw_flow(timestep, x0.shape, gen, dtype).t
    noise_win = torch.randn(x0.shape, generator=gen, dtype=dtype)
    noise_lose = torch.randn(x0.shape, generator=gen, dtype=dtype)

    single = batch_condition(batch.subset(slice(0, 1)), dtype)
    trajectories = sample_group(
        make_oracle(params, config),
        single,
        (1, *x0.shape[1:]),
        schedule,
        base_seed=seed,
        size=group_size,
        dtype=dtype,
    )
    rewards = [-float((tr.final**2).sum()) for tr in trajectories]
    group = Group(single, trajectories, rewards)
    with torch.no_grad():
        recorded, _ = trajectory_terms(
            make_oracle(params, config), trajectories, single, schedule
        )
    old_logprobs = recorded + 0.05 * torch.randn(
        recorded.shape, generator=gen, dtype=dtype
    )

    losses = {
        "fm": lambda p: flow_matching_objective(p, config, x0, condition, fm_draw),
        "dpo": lambda p: dpo_objective(
            p, ref_params, config, pair, dpo_t, noise_win, noise_lose, rl.beta_dpo
        ).loss,
        "grpo": lambda p: grpo_terms(
            p, ref_params, config, group, old_logprobs, schedule, rl
        ).loss,
    }
    return params, losses


def run_gradcheck(
    task,
    config,
    schedule,
    rl,
    timestep,
    seed,
    n_entries=DEFAULT_ENTRIES,
    step=DEFAULT_STEP,
    threshold=DEFAULT_THRESHOLD,
    corrupt=None,
):
    """
    Check all three losses.

    Returns
    -------
    dict
        ``{"fm": ..., "dpo": ..., "grpo": ...}`` of `CheckResult`.
    """
    params, losses = gradcheck_losses(task, config, schedule, rl, timestep, seed)
    report = {}
    for name, loss_fn in losses.items():
        result = check_gradients(
            loss_fn,
            params,
            n_entries=n_entries,
            step=step,
            seed=seed,
            threshold=threshold,
            corrupt=corrupt,
        )
        logger.info(
            "Gradient check %s: max relative error %.3g over %d entries (%s)",
            name,
            result.max_rel_error,
            result.entries,
            "pass" if result.passed else "FAIL",
        )
        report[name] = result
    return report


def raise_on_failure(report):
    failed = [name for name, result in report.items() if not result.passed]
    if failed:
        raise GradientCheckError(
            "gradient check failed for "
            + ", ".join(f"{n} ({report[n].max_rel_error:.3g})" for n in failed)
        )
