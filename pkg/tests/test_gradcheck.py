import math

import pytest

from flowdesk.exceptions import GradientCheckError
from flowdesk.flowcore import TimestepDist
from flowdesk.gradcheck import (
    CheckResult,
    check_gradients,
    corrupt_gradient,
    raise_on_failure,
    run_gradcheck,
)
from flowdesk.net import init_params
from flowdesk.preference import RLConfig
from flowdesk.sampler import NoiseSchedule
from flowdesk.tasks import GlyphSpec, GlyphTask


@pytest.fixture()
def setup(tiny_config):
    task = GlyphTask(GlyphSpec(canvas=8), patch=tiny_config.patch)
    return (
        task,
        tiny_config,
        NoiseSchedule(steps=2, sigma=0.5),
        RLConfig(group_size=2, beta_kl=0.1),
        TimestepDist(),
    )


def test_all_losses_pass(setup):
    report = run_gradcheck(*setup, seed=0, n_entries=40)
    assert set(report) == {"fm", "dpo", "grpo"}
    for result in report.values():
        assert result.entries == 40
        assert result.passed, result
    raise_on_failure(report)


def test_corrupted_gradient_fails(setup):
    report = run_gradcheck(*setup, seed=0, n_entries=20, corrupt=corrupt_gradient(1.5))
    for result in report.values():
        assert not result.passed
        assert result.max_rel_error == pytest.approx(1 / 3, rel=1e-3)
    with pytest.raises(GradientCheckError, match="fm"):
        raise_on_failure(report)


def test_check_gradients_quadratic(tiny_config):
    params = init_params(tiny_config, seed=0, std=0.2)
    params = {k: v.double() for k, v in params.items()}

    def loss(p):
        return sum((v**2).sum() for v in p.values()) / 2

    result = check_gradients(loss, params, n_entries=30)
    assert result.passed
    assert result.entries == 30
    assert result.max_rel_error < 1e-8


def test_report_dict():
    result = CheckResult(math.inf, 3, 1e-4, "out.weight[0]")
    d = result.to_dict()
    assert d["max_rel_error"] is None
    assert d["passed"] is False
    assert set(d) == {"max_rel_error", "entries", "threshold", "worst", "passed"}
