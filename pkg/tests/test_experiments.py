import copy
import json

import numpy as np
import pytest
import torch

from flowdesk import config_parser
from flowdesk.checkpoint import load_checkpoint
from flowdesk.exceptions import GradientCheckError, NumericError, ValidationError
from flowdesk.experiments import (
    GradCheckStep,
    MakePairsStep,
    SampleStep,
    TrainDpoStep,
    TrainFlowMatchingStep,
    TrainGrpoStep,
    training,
)
from flowdesk.gradcheck import corrupt_gradient
from flowdesk.net import ModelConfig
from flowdesk.pairs import read_pairs
from flowdesk.tasks import read_pgm, read_points_csv

TINY = {
    "task": "glyph",
    "seed": 3,
    "batch_size": 2,
    "log_interval": 1,
    "model": {"layers": 1, "heads": 2, "head_dim": 8},
    "schedule": {"steps": 2, "sigma": 0.5},
    "glyph": {"charset": "01", "canvas": 8},
    "pipeline": {"producers": 2, "capacity": 2},
    "rl": {"group_size": 2, "prompts_per_iteration": 1},
}


def tiny(out_dir, **overrides):
    kwargs = copy.deepcopy(TINY)
    for key, value in overrides.items():
        if isinstance(value, dict):
            kwargs.setdefault(key, {}).update(value)
        else:
            kwargs[key] = value
    kwargs["out_dir"] = str(out_dir)
    return kwargs


def read_metrics(path):
    lines = path.read_text().splitlines()
    return lines[0].split(","), [line.split(",") for line in lines[1:]]


def assert_same_params(path_a, path_b):
    a = load_checkpoint(path_a).to_params()
    b = load_checkpoint(path_b).to_params()
    assert list(a) == list(b)
    for name in a:
        assert torch.equal(a[name], b[name]), name


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A two-step flow-matching checkpoint and a synthetic pairs file."""
    root = tmp_path_factory.mktemp("trained")
    TrainFlowMatchingStep(**tiny(root / "fm", steps=2)).run()
    MakePairsStep(**tiny(root / "pairs")).run()
    return root


@pytest.mark.parametrize(
    ("step_class", "sampler_steps"),
    [(SampleStep, 50), (TrainGrpoStep, 10), (MakePairsStep, 10)],
)
def test_spec_defaults(step_class, sampler_steps):
    config = config_parser.config_from_dict(
        {}, step_class.load_spec_file(), allow_missing=True
    )
    assert config["schedule"]["steps"] == sampler_steps
    model = ModelConfig()
    for key in ("layers", "heads", "head_dim", "ffn_mult"):
        assert config["model"][key] == getattr(model, key), key


def test_train_fm_outputs(trained):
    out = trained / "fm"
    assert sorted(p.name for p in out.iterdir()) == [
        "checkpoint.ffck",
        "config.asdf",
        "metrics.csv",
    ]

    header, rows = read_metrics(out / "metrics.csv")
    assert header == ["step", "loss", "grad_norm", "wall_ms"]
    assert [row[0] for row in rows] == ["0", "1"]
    assert all(row[-1] == "0" for row in rows)
    assert all(np.isfinite(float(row[1])) for row in rows)

    meta = load_checkpoint(out / "checkpoint.ffck").metadata
    assert meta["command"] == "train-fm"
    assert meta["task"] == "glyph"
    assert meta["seed"] == 3
    assert meta["steps"] == 2
    assert meta["model"]["layers"] == 1


def test_train_fm_rerun_is_byte_identical(trained, tmp_path):
    TrainFlowMatchingStep(**tiny(tmp_path, steps=2)).run()
    for name in ("checkpoint.ffck", "metrics.csv"):
        assert (tmp_path / name).read_bytes() == (trained / "fm" / name).read_bytes()


def test_train_fm_init_checkpoint(trained, tmp_path):
    init = str(trained / "fm" / "checkpoint.ffck")
    TrainFlowMatchingStep(**tiny(tmp_path, steps=0, init_checkpoint=init)).run()
    assert_same_params(init, tmp_path / "checkpoint.ffck")
    header, rows = read_metrics(tmp_path / "metrics.csv")
    assert header[0] == "step"
    assert rows == []


@pytest.mark.parametrize(
    ("step_class", "overrides", "match"),
    [
        (TrainFlowMatchingStep, {"model": {"hidden": 17}}, "hidden"),
        (TrainFlowMatchingStep, {"model": {"channels": 3}}, "channels"),
        (TrainFlowMatchingStep, {"pipeline": {"buckets": ["8x6"]}}, "bucket"),
        (TrainDpoStep, {}, "checkpoint and a pairs file"),
        (TrainDpoStep, {"task": "mixture"}, "checkpoint and a pairs file"),
        (TrainGrpoStep, {}, "needs a checkpoint"),
        (SampleStep, {}, "needs a checkpoint"),
        (MakePairsStep, {"task": "mixture"}, "no preference pairs"),
        (MakePairsStep, {"mode": "best-of-n"}, "need a checkpoint"),
        (GradCheckStep, {"schedule": {"sigma": 0.0}}, "sigma > 0"),
    ],
)
def test_invalid_config_writes_nothing(tmp_path, step_class, overrides, match):
    out = tmp_path / "out"
    step = step_class(**tiny(out, **overrides))
    with pytest.raises(ValidationError, match=match):
        step.run()
    assert not out.exists()


def test_checkpoint_config_mismatch(trained, tmp_path):
    checkpoint = str(trained / "fm" / "checkpoint.ffck")
    step = SampleStep(**tiny(tmp_path, checkpoint=checkpoint, model={"layers": 2}))
    with pytest.raises(ValidationError, match="model.layers"):
        step.run()
    assert list(tmp_path.iterdir()) == []


def test_grpo_needs_stochastic_sampler(trained, tmp_path):
    checkpoint = str(trained / "fm" / "checkpoint.ffck")
    step = TrainGrpoStep(**tiny(tmp_path, checkpoint=checkpoint, schedule={"sigma": 0}))
    with pytest.raises(ValidationError, match="sigma > 0"):
        step.run()


def test_make_pairs_synthetic(trained):
    out = trained / "pairs"
    lines = (out / "pairs.jsonl").read_text().splitlines()
    entries = [json.loads(line) for line in lines]
    assert [e["prompt"] for e in entries] == ["0", "1"]
    assert entries[0]["win"] == {"char": "0"}
    assert entries[0]["lose"] == {"char": "1"}

    summary = json.loads((out / "summary.json").read_text())
    assert summary["pairs"] == 2
    assert summary["reward_gap"] is None


def test_make_pairs_best_of_n(trained, tmp_path):
    checkpoint = str(trained / "fm" / "checkpoint.ffck")
    step = MakePairsStep(
        **tiny(tmp_path, mode="best-of-n", checkpoint=checkpoint, candidates=2)
    )
    step.run()
    assert sorted(p.name for p in (tmp_path / "pairs").iterdir()) == [
        "0000_lose.pgm",
        "0000_win.pgm",
        "0001_lose.pgm",
        "0001_win.pgm",
    ]
    records = read_pairs(str(tmp_path / "pairs.jsonl"), step.task_impl)
    assert [r.label for r in records] == ["0", "1"]
    assert records[0].win.shape == (8, 8)

    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["reward_gap"]["count"] == 2
    assert summary["reward_gap"]["mean"] >= 0


def test_train_dpo(trained, tmp_path):
    kwargs = tiny(
        tmp_path / "a",
        steps=2,
        checkpoint=str(trained / "fm" / "checkpoint.ffck"),
        pairs=str(trained / "pairs" / "pairs.jsonl"),
    )
    TrainDpoStep(**copy.deepcopy(kwargs)).run()
    header, rows = read_metrics(tmp_path / "a" / "metrics.csv")
    assert header == ["step", "loss", "margin", "grad_norm", "wall_ms"]
    assert len(rows) == 2
    # the policy starts at the reference
    assert float(rows[0][1]) == pytest.approx(np.log(2), rel=1e-5)
    meta = load_checkpoint(tmp_path / "a" / "checkpoint.ffck").metadata
    assert meta["command"] == "train-dpo"

    kwargs["out_dir"] = str(tmp_path / "b")
    TrainDpoStep(**kwargs).run()
    for name in ("checkpoint.ffck", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (
            tmp_path / "b" / name
        ).read_bytes()


def test_train_dpo_zero_steps(trained, tmp_path):
    checkpoint = str(trained / "fm" / "checkpoint.ffck")
    step = TrainDpoStep(
        **tiny(
            tmp_path,
            steps=0,
            checkpoint=checkpoint,
            pairs=str(trained / "pairs" / "pairs.jsonl"),
        )
    )
    step.run()
    assert_same_params(checkpoint, tmp_path / "checkpoint.ffck")
    _, rows = read_metrics(tmp_path / "metrics.csv")
    assert rows == []


def test_train_dpo_rejects_bad_pairs(trained, tmp_path):
    pairs = tmp_path / "pairs.jsonl"
    pairs.write_text('{"prompt": "0", "win": {"char": "0"}}\n')
    out = tmp_path / "out"
    step = TrainDpoStep(
        **tiny(
            out,
            checkpoint=str(trained / "fm" / "checkpoint.ffck"),
            pairs=str(pairs),
        )
    )
    with pytest.raises(ValidationError, match="pairs.jsonl:1:"):
        step.run()
    assert not out.exists()


def test_train_grpo(trained, tmp_path):
    step = TrainGrpoStep(
        **tiny(
            tmp_path,
            steps=1,
            eval_seeds=1,
            checkpoint=str(trained / "fm" / "checkpoint.ffck"),
        )
    )
    step.run()

    header, rows = read_metrics(tmp_path / "metrics.csv")
    assert header == [
        "step",
        "loss",
        "mean_reward",
        "mean_kl",
        "clip_fraction",
        "grad_norm",
        "wall_ms",
    ]
    assert len(rows) == 1
    row = dict(zip(header, rows[0]))
    assert 0 <= float(row["mean_reward"]) <= 1
    # one inner epoch starts at the rollout policy
    assert float(row["clip_fraction"]) == 0
    assert float(row["mean_kl"]) == pytest.approx(0, abs=1e-12)

    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["mode"] == "sde"
    assert summary["seeds"] == [3]
    assert summary["prompts"] == ["0", "1"]
    assert summary["reference"]["count"] == 2
    assert summary["policy"]["count"] == 2
    assert summary["improvement"] == pytest.approx(
        summary["policy"]["mean"] - summary["reference"]["mean"]
    )


def test_sample_glyph(trained, tmp_path):
    checkpoint = str(trained / "fm" / "checkpoint.ffck")
    records = SampleStep(**tiny(tmp_path, checkpoint=checkpoint, n=3)).run()
    assert [(r["prompt"], r["seed"]) for r in records] == [("0", 3), ("1", 4), ("0", 5)]
    assert sorted(p.name for p in (tmp_path / "samples").iterdir()) == [
        "0000.pgm",
        "0001.pgm",
        "0002.pgm",
    ]
    canvas = read_pgm(tmp_path / "samples" / "0001.pgm")
    assert canvas.shape == (8, 8)

    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["mode"] == "ode"
    assert summary["reward"]["count"] == 3
    assert [s["file"] for s in summary["samples"]][0] == "samples/0000.pgm"


def test_sample_single_prompt(trained, tmp_path):
    checkpoint = str(trained / "fm" / "checkpoint.ffck")
    records = SampleStep(
        **tiny(tmp_path, checkpoint=checkpoint, n=2, prompt="1", mode="sde")
    ).run()
    assert [r["prompt"] for r in records] == ["1", "1"]

    with pytest.raises(ValidationError, match="no prompt"):
        SampleStep(**tiny(tmp_path / "z", checkpoint=checkpoint, prompt="Z")).run()


def test_sample_mixture(tmp_path):
    TrainFlowMatchingStep(**tiny(tmp_path / "fm", task="mixture", steps=1)).run()
    SampleStep(
        **tiny(
            tmp_path / "sample",
            task="mixture",
            n=5,
            checkpoint=str(tmp_path / "fm" / "checkpoint.ffck"),
        )
    ).run()
    points = read_points_csv(tmp_path / "sample" / "samples.csv")
    assert points.shape == (5, 2)
    assert np.isfinite(points).all()
    summary = json.loads((tmp_path / "sample" / "summary.json").read_text())
    assert summary["reward"] is None


def test_gradcheck_passes(tmp_path):
    report = GradCheckStep(**tiny(tmp_path, entries=20)).run()
    assert sorted(report) == ["dpo", "fm", "grpo"]
    written = json.loads((tmp_path / "report.json").read_text())
    assert all(written[name]["passed"] for name in ("fm", "dpo", "grpo"))
    assert all(written[name]["entries"] == 20 for name in written)


def test_gradcheck_failure_keeps_report(tmp_path):
    step = GradCheckStep(**tiny(tmp_path, entries=20))
    step.corrupt = corrupt_gradient(1.5)
    with pytest.raises(GradientCheckError, match="fm"):
        step.run()
    written = json.loads((tmp_path / "report.json").read_text())
    assert not written["fm"]["passed"]
    assert written["fm"]["max_rel_error"] == pytest.approx(1 / 3, rel=1e-3)


def test_numeric_error_saves_last_good_params(trained, tmp_path, monkeypatch):
    gradient = training.gradient
    calls = []

    def failing_gradient(params, closure):
        calls.append(None)
        loss, grads = gradient(params, closure)
        if len(calls) == 3:
            grads = {name: torch.full_like(g, np.nan) for name, g in grads.items()}
        return loss, grads

    monkeypatch.setattr(training, "gradient", failing_gradient)
    step = TrainFlowMatchingStep(**tiny(tmp_path, steps=5))
    with pytest.raises(NumericError, match="not finite"):
        step.run()

    _, rows = read_metrics(tmp_path / "metrics.csv")
    assert len(rows) == 2
    assert load_checkpoint(tmp_path / "checkpoint.ffck").metadata["aborted"] is True
    # the aborted run holds the parameters after two good steps
    assert_same_params(trained / "fm" / "checkpoint.ffck", tmp_path / "checkpoint.ffck")
