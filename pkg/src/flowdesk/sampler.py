"""
ODE and SDE samplers for the rectified flow.

Continuous time ascends from the noise end ``t_0 = eps`` to the data end
``t_T = 1``.  The SDE step is the Euler-Maruyama discretization of::

    dx = (v + sigma**2 / (2 t) * (x + (1 - t) v)) dt + sigma dw

and every stochastic step is a Gaussian transition with covariance
``sigma**2 * dt * I``, which gives closed-form log-densities and KL terms.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import torch

from .exceptions import DegenerateDensityError, DomainError, ShapeError, ValidationError
from .flowcore import SDE_TIME_FLOOR, expand_time

__all__ = [
    "NoiseSchedule",
    "Trajectory",
    "ode_rollout",
    "ode_step",
    "sample_group",
    "sample_trajectory",
    "sde_drift",
    "sde_step",
    "step_kl",
    "transition_logprob",
]

logger = logging.getLogger(__name__)

SIGMA_SHAPES = ("constant", "linear")

#: Floor on the time factor of the linear shape.
LINEAR_SIGMA_TIME_FLOOR = 0.1


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Time grid and diffusion magnitude of the sampler.

    Parameters
    ----------
    steps : int
        Number of steps ``T``.
    eps : float
        Time floor; the grid is ``t_k = eps + (1 - eps) * k / T``.
    sigma : float
        Diffusion magnitude ``a``.
    sigma_shape : {"constant", "linear"}
        ``sigma_t = a`` or ``sigma_t = a * max(t, LINEAR_SIGMA_TIME_FLOOR)``.
    """

    steps: int = 10
    eps: float = SDE_TIME_FLOOR
    sigma: float = 0.3
    sigma_shape: str = "constant"

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError(f"schedule steps must be >= 1, got {self.steps}")
        if not 0.0 < self.eps < 0.5:
            raise ValidationError(f"schedule eps must lie in (0, 0.5), got {self.eps}")
        if self.sigma < 0:
            raise ValidationError(f"schedule sigma must be >= 0, got {self.sigma}")
        if self.sigma_shape not in SIGMA_SHAPES:
            raise ValidationError(
                f"schedule sigma_shape must be one of {SIGMA_SHAPES}, "
                f"got {self.sigma_shape!r}"
            )

    @classmethod
    def from_section(cls, section):
        return cls(
            steps=int(section["steps"]),
            eps=float(section["eps"]),
            sigma=float(section["sigma"]),
            sigma_shape=section["sigma_shape"],
        )

    @property
    def dt(self):
        return (1.0 - self.eps) / self.steps

    def times(self):
        """The ``T + 1`` grid times as Python floats."""
        return [
            self.eps + (1.0 - self.eps) * k / self.steps for k in range(self.steps + 1)
        ]

    def sigma_of_t(self, t):
        if self.sigma_shape == "linear":
            return self.sigma * max(t, LINEAR_SIGMA_TIME_FLOOR)
        return self.sigma

    def replace(self, **changes):
        values = {
            "steps": self.steps,
            "eps": self.eps,
            "sigma": self.sigma,
            "sigma_shape": self.sigma_shape,
        }
        values.update(changes)
        return NoiseSchedule(**values)


@dataclass
class Trajectory:
    """
    One sampled generation.

    ``states[k]`` is the latent at ``times[k]``; ``noises[k]`` and
    ``logprobs[k]`` belong to the transition ``k -> k + 1``.  Steps with
    ``sigma_t == 0`` have no density and record ``nan``.
    """

    states: list = field(default_factory=list)
    times: list = field(default_factory=list)
    noises: list = field(default_factory=list)
    logprobs: list = field(default_factory=list)
    sigmas: list = field(default_factory=list)

    @property
    def final(self):
        return self.states[-1]

    @property
    def steps(self):
        return len(self.logprobs)


def _check_shapes(x, other, what):
    if x.shape != other.shape:
        raise ShapeError(
            f"{what}: shapes {tuple(x.shape)} and {tuple(other.shape)} differ"
        )


def _check_time(t, eps):
    t_min = float(t.min()) if isinstance(t, torch.Tensor) else float(t)
    # A grid point computed as eps + 0 must pass; allow one rounding step.
    if t_min < eps * (1.0 - 1e-12):
        raise DomainError(f"SDE time {t_min} is below the floor {eps}")


def _check_dt(dt):
    if not dt > 0:
        raise DomainError(f"step size must be positive, got {dt}")


def _reduce(values, batched):
    if batched:
        return values.flatten(1).sum(dim=1)
    return values.sum()


def ode_step(x, v, dt):
    """Deterministic Euler step ``x + v * dt``."""
    _check_shapes(x, v, "ode_step")
    _check_dt(dt)
    return x + v * dt


def sde_drift(x, v, t, sigma, eps=SDE_TIME_FLOOR):
    """
    Drift ``v + sigma**2 / (2 t) * (x + (1 - t) * v)``.

    ``t`` may be a per-batch tensor; it must not fall below ``eps``.
    """
    _check_shapes(x, v, "sde_drift")
    _check_time(t, eps)
    tb = expand_time(t, x)
    return v + (sigma**2 / (2 * tb)) * (x + (1 - tb) * v)


def sde_step(x, v, t, dt, sigma, noise, eps=SDE_TIME_FLOOR):
    """
    Euler-Maruyama step
    ``x + sde_drift(x, v, t, sigma) * dt + sigma * sqrt(dt) * noise``.
    """
    _check_shapes(x, noise, "sde_step")
    _check_dt(dt)
    return x + sde_drift(x, v, t, sigma, eps=eps) * dt + (sigma * math.sqrt(dt)) * noise


def transition_logprob(
    x_next, x, v, t, dt, sigma, eps=SDE_TIME_FLOOR, batched=False
):
    """
    Log-density of ``x_next`` under the SDE step from ``x``.

    The transition is ``Normal(x + sde_drift * dt, sigma**2 * dt * I)``; the
    log-density is summed over all elements, or over all but the leading
    dimension when ``batched``.
    """
    if sigma == 0:
        raise DegenerateDensityError("transition density is degenerate for sigma == 0")
    _check_shapes(x_next, x, "transition_logprob")
    _check_dt(dt)
    mean = x + sde_drift(x, v, t, sigma, eps=eps) * dt
    var = sigma**2 * dt
    quad = (x_next - mean) ** 2 / (2 * var)
    log_norm = 0.5 * math.log(2 * math.pi * var)
    return -_reduce(quad + log_norm, batched)


def step_kl(v_policy, v_ref, t, dt, sigma, eps=SDE_TIME_FLOOR, batched=False):
    """
    Closed-form KL between the policy and reference step transitions::

        dt / 2 * (sigma * (1 - t) / (2 t) + 1 / sigma)**2 * ||v_policy - v_ref||**2
    """
    if sigma == 0:
        raise DegenerateDensityError("step KL is undefined for sigma == 0")
    _check_shapes(v_policy, v_ref, "step_kl")
    _check_time(t, eps)
    _check_dt(dt)
    sq = _reduce((v_policy - v_ref) ** 2, batched)
    if batched and isinstance(t, torch.Tensor):
        t = t.to(sq.dtype)
    coef = dt / 2 * (sigma * (1 - t) / (2 * t) + 1 / sigma) ** 2
    return coef * sq


@torch.no_grad()
def sample_trajectory(model, condition, shape, schedule, rng, dtype=torch.float32):
    """
    Roll out one SDE trajectory.

    Parameters
    ----------
    model : callable
        Velocity oracle ``model(x, t, condition) -> v``.
    condition : object
        Passed through to ``model``.
    shape : tuple of int
        Latent shape.
    schedule : NoiseSchedule
    rng : torch.Generator
        Owned by this trajectory; draws the initial noise first, then one
        noise tensor per step.

    Returns
    -------
    Trajectory
    """
    times = schedule.times()
    dt = schedule.dt
    x = torch.randn(shape, generator=rng, dtype=dtype)
    traj = Trajectory(states=[x], times=times)
    for k in range(schedule.steps):
        t = times[k]
        sigma = schedule.sigma_of_t(t)
        v = model(x, t, condition)
        noise = torch.randn(shape, generator=rng, dtype=dtype)
        x_next = sde_step(x, v, t, dt, sigma, noise, eps=schedule.eps)
        if sigma > 0:
            logprob = float(
                transition_logprob(x_next, x, v, t, dt, sigma, eps=schedule.eps)
            )
        else:
            logprob = math.nan
        traj.noises.append(noise)
        traj.logprobs.append(logprob)
        traj.sigmas.append(sigma)
        traj.states.append(x_next)
        x = x_next
    return traj


@torch.no_grad()
def ode_rollout(model, condition, shape, schedule, rng, dtype=torch.float32):
    """
    Deterministic rollout on the same grid and from the same initial draw
    as `sample_trajectory`.  Returns the list of states.
    """
    times = schedule.times()
    dt = schedule.dt
    x = torch.randn(shape, generator=rng, dtype=dtype)
    states = [x]
    for k in range(schedule.steps):
        x = ode_step(x, model(x, times[k], condition), dt)
        states.append(x)
    return states


def trajectory_generator(base_seed, index):
    """Random stream owned by trajectory ``index`` of a run."""
    gen = torch.Generator()
    gen.manual_seed(base_seed + index)
    return gen


def sample_group(
    model, condition, shape, schedule, base_seed, size, workers=1, dtype=torch.float32
):
    """
    Sample ``size`` independent trajectories for one condition.

    Trajectory ``i`` draws from its own generator seeded with
    ``base_seed + i``, so serial and threaded sampling agree bitwise.
    """

    def one(i):
        return sample_trajectory(
            model, condition, shape, schedule, trajectory_generator(base_seed, i), dtype
        )

    if workers <= 1:
        return [one(i) for i in range(size)]
    logger.debug("Sampling %d trajectories on %d threads", size, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(size)))
