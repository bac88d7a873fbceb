import math

import numpy as np
import pytest
import torch

from flowdesk.exceptions import (
    DegenerateDensityError,
    DomainError,
    ShapeError,
    ValidationError,
)
from flowdesk.sampler import (
    NoiseSchedule,
    ode_rollout,
    ode_step,
    sample_group,
    sample_trajectory,
    sde_drift,
    sde_step,
    step_kl,
    trajectory_generator,
    transition_logprob,
)

T64 = torch.float64


def t64(values):
    return torch.tensor(values, dtype=T64)


def linear_oracle(x, t, condition):
    """A velocity field that depends on both x and t."""
    return 0.5 - 0.3 * x * (1 + t)


def gaussian_kl(mean_p, mean_q, var):
    """KL between isotropic Gaussians of equal variance."""
    return float(((mean_p - mean_q) ** 2).sum() / (2 * var))


def test_ode_step():
    torch.testing.assert_close(ode_step(t64([0.0]), t64([1.0]), 0.1), t64([0.1]))
    with pytest.raises(DomainError):
        ode_step(t64([0.0]), t64([1.0]), 0.0)
    with pytest.raises(ShapeError):
        ode_step(t64([0.0]), t64([1.0, 2.0]), 0.1)


def test_drift_examples():
    v = t64([1.0])
    torch.testing.assert_close(sde_drift(t64([3.0]), v, 0.7, 0.0), v)
    torch.testing.assert_close(sde_drift(t64([1.0]), t64([0.0]), 1.0, 1.0), t64([0.5]))
    torch.testing.assert_close(sde_drift(t64([0.0]), v, 0.5, 1.0), t64([1.5]))


def test_drift_time_floor():
    with pytest.raises(DomainError):
        sde_drift(t64([0.0]), t64([0.0]), 1e-4, 1.0)
    with pytest.raises(DomainError):
        sde_drift(t64([0.0]), t64([0.0]), 0.0, 1.0)


def test_sde_step_examples():
    x, v, noise = t64([0.0]), t64([1.0]), t64([0.0])
    torch.testing.assert_close(sde_step(x, v, 0.5, 0.1, 1.0, noise), t64([0.15]))
    noise = torch.randn(4, dtype=T64)
    x = torch.randn(4, dtype=T64)
    v = torch.randn(4, dtype=T64)
    assert torch.equal(sde_step(x, v, 0.3, 0.1, 0.0, noise), ode_step(x, v, 0.1))


def test_logprob_matches_normal_density():
    gen = torch.Generator().manual_seed(0)
    for _ in range(50):
        x = torch.randn(5, generator=gen, dtype=T64)
        v = torch.randn(5, generator=gen, dtype=T64)
        x_next = torch.randn(5, generator=gen, dtype=T64)
        t = 0.05 + 0.9 * float(torch.rand(1, generator=gen, dtype=T64))
        dt, sigma = 0.05, 0.2 + float(torch.rand(1, generator=gen, dtype=T64))
        mean = x + sde_drift(x, v, t, sigma) * dt
        normal = torch.distributions.Normal(mean, sigma * math.sqrt(dt))
        expected = normal.log_prob(x_next)
        actual = transition_logprob(x_next, x, v, t, dt, sigma)
        assert abs(float(actual) - float(expected.sum())) < 1e-10


def test_logprob_batched_and_degenerate():
    x = torch.randn(3, 2, 2, dtype=T64)
    v = torch.randn(3, 2, 2, dtype=T64)
    x_next = torch.randn(3, 2, 2, dtype=T64)
    batched = transition_logprob(x_next, x, v, 0.4, 0.1, 0.5, batched=True)
    assert batched.shape == (3,)
    total = transition_logprob(x_next, x, v, 0.4, 0.1, 0.5)
    torch.testing.assert_close(batched.sum(), total)
    with pytest.raises(DegenerateDensityError):
        transition_logprob(x_next, x, v, 0.4, 0.1, 0.0)


def test_sde_step_statistics():
    n, t, dt, sigma = 100_000, 0.4, 0.05, 0.7
    gen = torch.Generator().manual_seed(11)
    x = t64([0.3, -1.2, 2.0])
    v = t64([1.0, 0.5, -0.25])
    noise = torch.randn(n, 3, generator=gen, dtype=T64)
    samples = sde_step(x.expand(n, 3), v.expand(n, 3), t, dt, sigma, noise)

    var = sigma**2 * dt
    stderr = var * math.sqrt(2 / (n - 1))
    assert torch.all((samples.var(dim=0) - var).abs() < 4 * stderr)
    mean = x + sde_drift(x, v, t, sigma) * dt
    assert torch.all((samples.mean(dim=0) - mean).abs() < 4 * math.sqrt(var / n))


def test_logprob_integrates_to_one():
    rng = np.random.default_rng(5)
    for _ in range(10):
        t = rng.uniform(0.05, 0.95)
        dt = rng.uniform(0.01, 0.1)
        sigma = rng.uniform(0.1, 1.5)
        x = t64([rng.standard_normal()])
        v = t64([rng.standard_normal()])
        mean = float(x + sde_drift(x, v, t, sigma) * dt)
        std = sigma * math.sqrt(dt)
        grid = torch.linspace(mean - 12 * std, mean + 12 * std, 4001, dtype=T64)
        grid = grid[:, None]
        n = grid.shape[0]
        density = torch.exp(
            transition_logprob(
                grid, x.expand(n, 1), v.expand(n, 1), t, dt, sigma, batched=True
            )
        )
        h = float(grid[1, 0] - grid[0, 0])
        integral = h * (float(density.sum()) - 0.5 * float(density[0] + density[-1]))
        assert abs(integral - 1.0) < 1e-6


def test_kl_example_and_zero():
    v = t64([1.0, 0.0])
    assert float(step_kl(v, t64([0.0, 0.0]), 0.5, 0.1, 1.0)) == pytest.approx(
        0.1125, abs=1e-15
    )
    assert float(step_kl(v, v.clone(), 0.5, 0.1, 1.0)) == 0.0
    with pytest.raises(DegenerateDensityError):
        step_kl(v, v, 0.5, 0.1, 0.0)


def test_kl_matches_gaussian_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        t = rng.uniform(1e-3, 1.0)
        dt = rng.uniform(1e-3, 0.2)
        sigma = rng.uniform(0.05, 2.0)
        x = torch.from_numpy(rng.standard_normal(4))
        v_p = torch.from_numpy(rng.standard_normal(4))
        v_q = torch.from_numpy(rng.standard_normal(4))
        mean_p = x + sde_drift(x, v_p, t, sigma) * dt
        mean_q = x + sde_drift(x, v_q, t, sigma) * dt
        expected = gaussian_kl(mean_p, mean_q, sigma**2 * dt)
        actual = float(step_kl(v_p, v_q, t, dt, sigma))
        worst = max(worst, abs(actual - expected) / max(1.0, abs(expected)))
    assert worst < 1e-10


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(1)
    gen = torch.Generator().manual_seed(1)
    n = 100_000
    for _ in range(20):
        t = rng.uniform(0.05, 0.95)
        dt = rng.uniform(0.01, 0.1)
        sigma = rng.uniform(0.2, 1.5)
        x = torch.from_numpy(rng.standard_normal(3))
        v_p = torch.from_numpy(rng.standard_normal(3))
        v_q = v_p + 0.3 * torch.from_numpy(rng.standard_normal(3))
        mean = x + sde_drift(x, v_p, t, sigma) * dt
        noise = torch.randn(n, 3, generator=gen, dtype=T64)
        samples = mean + sigma * math.sqrt(dt) * noise
        xs = x.expand(n, 3)
        log_p, log_q = (
            transition_logprob(samples, xs, v.expand(n, 3), t, dt, sigma, batched=True)
            for v in (v_p, v_q)
        )
        log_ratio = log_p - log_q
        estimate = float(log_ratio.mean())
        stderr = float(log_ratio.std()) / math.sqrt(n)
        exact = float(step_kl(v_p, v_q, t, dt, sigma))
        assert abs(estimate - exact) < 4 * stderr + 1e-12


def test_schedule_grid():
    schedule = NoiseSchedule(steps=4, eps=0.2)
    times = schedule.times()
    assert times[0] == 0.2
    assert times[-1] == pytest.approx(1.0)
    assert all(a < b for a, b in zip(times, times[1:]))
    assert schedule.dt == pytest.approx(0.2)
    assert NoiseSchedule(sigma=0.5, sigma_shape="linear").sigma_of_t(0.5) == 0.25


def test_linear_sigma_floor():
    schedule = NoiseSchedule(sigma=0.3, sigma_shape="linear")
    t = schedule.eps
    assert schedule.sigma_of_t(t) == pytest.approx(0.03)
    assert schedule.sigma_of_t(0.05) == schedule.sigma_of_t(0.1)
    v_p, v_q = t64([1.0, -0.5]), t64([0.5, 0.5])
    kl_linear = float(step_kl(v_p, v_q, t, schedule.dt, schedule.sigma_of_t(t)))
    kl_constant = float(step_kl(v_p, v_q, t, schedule.dt, schedule.sigma))
    assert math.isfinite(kl_linear)
    assert kl_linear <= 100 * kl_constant


@pytest.mark.parametrize(
    "kwargs",
    [
        {"steps": 0},
        {"eps": 0.0},
        {"eps": 0.5},
        {"sigma": -1.0},
        {"sigma_shape": "cosine"},
    ],
)
def test_bad_schedule(kwargs):
    with pytest.raises(ValidationError):
        NoiseSchedule(**kwargs)


@pytest.mark.parametrize("steps", [1, 10, 50])
def test_zero_sigma_sde_equals_ode(steps):
    schedule = NoiseSchedule(steps=steps, sigma=0.0)
    traj = sample_trajectory(
        linear_oracle, None, (2, 3), schedule, trajectory_generator(7, 0), T64
    )
    states = ode_rollout(
        linear_oracle, None, (2, 3), schedule, trajectory_generator(7, 0), T64
    )
    assert len(traj.states) == len(states) == steps + 1
    for a, b in zip(traj.states, states):
        assert torch.equal(a, b)
    assert all(math.isnan(lp) for lp in traj.logprobs)


def test_trajectory_replay():
    schedule = NoiseSchedule(steps=8, sigma=0.4)
    traj = sample_trajectory(
        linear_oracle, None, (3,), schedule, trajectory_generator(0, 0), T64
    )
    assert traj.steps == 8
    x = traj.states[0]
    for k, noise in enumerate(traj.noises):
        t = traj.times[k]
        x_next = sde_step(x, linear_oracle(x, t, None), t, schedule.dt, 0.4, noise)
        assert torch.equal(x_next, traj.states[k + 1])
        logprob = transition_logprob(
            x_next, x, linear_oracle(x, t, None), t, schedule.dt, 0.4
        )
        assert float(logprob) == traj.logprobs[k]
        x = x_next


def test_group_threads_match_serial():
    schedule = NoiseSchedule(steps=5)
    serial = sample_group(linear_oracle, None, (4,), schedule, 11, size=6, dtype=T64)
    threaded = sample_group(
        linear_oracle, None, (4,), schedule, 11, size=6, workers=3, dtype=T64
    )
    for a, b in zip(serial, threaded):
        assert torch.equal(a.final, b.final)
        assert a.logprobs == b.logprobs
    assert not torch.equal(serial[0].final, serial[1].final)
