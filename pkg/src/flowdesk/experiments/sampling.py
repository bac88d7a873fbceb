"""
Sampling commands: draw outputs from a checkpoint and build preference pairs.
"""

import json
import logging
import os

import numpy as np

from ..evaluation import SAMPLE_MODES, generate, summarize_rewards
from ..exceptions import ValidationError
from ..net import make_oracle
from ..pairs import synthetic_pairs, write_pairs
from ..tasks import write_pgm, write_points_csv
from ..utilities import ensure_dir
from .base import ExperimentStep

__all__ = ["MakePairsStep", "SampleStep"]

logger = logging.getLogger(__name__)

SUMMARY_NAME = "summary.json"
PAIRS_NAME = "pairs.jsonl"


def write_summary(path, summary):
    with open(path, "w", encoding="utf-8") as fd:
        json.dump(summary, fd, indent=2, sort_keys=True)
        fd.write("\n")


class SampleStep(ExperimentStep):
    """
    Draw ``n`` samples from a checkpoint, cycling through the task prompts.

    Sample ``i`` uses seed ``seed + i``.  Glyph and edit samples are written
    as graymaps under ``samples/`` and scored with the task reward; mixture
    samples are written to ``samples.csv``.
    """

    command = "sample"

    spec = """
    checkpoint = input_file(default=None)  # Parameters to sample from
    mode = option('ode', 'sde', default='ode')  # Deterministic ODE or stochastic SDE sampler
    n = integer(min=0, default=16)  # Number of samples
    prompt = string(default=None)  # Only this prompt label; None cycles through all
    [schedule]
    steps = integer(min=1, default=50)  # Sampler steps T
    """  # noqa: E501

    def check_inputs(self):
        if not self.checkpoint:
            raise ValidationError("sample needs a checkpoint")
        if self.prompt is not None:
            self.prompts = [self.task_impl.prompt(self.prompt)]
        else:
            self.prompts = self.task_impl.prompts()
        self.params = self.load_params(self.checkpoint)

    def process(self):
        self.prepare_output()
        task = self.task_impl
        oracle = make_oracle(self.params, self.model_config)
        records, points = [], []
        with self.deterministic():
            for i in range(self.n):
                prompt = self.prompts[i % len(self.prompts)]
                label, _, condition = prompt
                seed = self.seed + i
                [canvas] = generate(
                    oracle,
                    task,
                    prompt,
                    [seed],
                    self.noise_schedule,
                    mode=self.mode,
                    dtype=self.torch_dtype,
                )
                record = {"index": i, "prompt": label, "seed": seed}
                if task.has_reward:
                    name = os.path.join("samples", f"{i:04d}.pgm")
                    ensure_dir(self.output_path("samples"))
                    write_pgm(self.output_path(name), canvas)
                    record["file"] = name
                    record["reward"] = float(task.reward(canvas, label, condition))
                else:
                    points.append(np.reshape(canvas, (-1, 2)))
                records.append(record)
        if not task.has_reward:
            points = np.concatenate(points) if points else np.zeros((0, 2))
            write_points_csv(self.output_path("samples.csv"), points)

        rewards = [r["reward"] for r in records if "reward" in r]
        summary = {
            "command": self.command,
            "mode": self.mode,
            "n": self.n,
            "samples": records,
            "reward": summarize_rewards(rewards) if task.has_reward else None,
        }
        write_summary(self.output_path(SUMMARY_NAME), summary)
        if rewards:
            logger.info(
                "Mean reward of %d samples: %.4f", len(rewards), np.mean(rewards)
            )
        return records


class MakePairsStep(ExperimentStep):
    """
    Write a preference-pairs file.

    ``synthetic`` pairs each prompt's golden image (win) with the golden
    image of a random other character (lose).  ``best-of-n`` samples
    ``candidates`` outputs per prompt from a checkpoint and pairs the highest
    reward sample (win) with the lowest (lose).
    """

    command = "make-pairs"

    spec = """
    mode = option('synthetic', 'best-of-n', default='synthetic')  # Pair source
    checkpoint = input_file(default=None)  # Parameters sampled from in best-of-n mode
    candidates = integer(min=2, default=4)  # Samples per prompt in best-of-n mode
    sample_mode = option('ode', 'sde', default='sde')  # Sampler in best-of-n mode
    """  # noqa: E501

    def check_inputs(self):
        if not self.task_impl.has_reward:
            raise ValidationError(f"the {self.task} task has no preference pairs")
        if self.sample_mode not in SAMPLE_MODES:
            raise ValidationError(f"unknown sample mode {self.sample_mode!r}")
        self.params = None
        if self.mode == "best-of-n":
            if not self.checkpoint:
                raise ValidationError("best-of-n pairs need a checkpoint")
            self.params = self.load_params(self.checkpoint)

    def process(self):
        self.prepare_output()
        if self.mode == "synthetic":
            entries = synthetic_pairs(self.task_impl, np.random.default_rng(self.seed))
            gaps = []
        else:
            entries, gaps = self._best_of_n()
        path = self.output_path(PAIRS_NAME)
        write_pairs(path, entries)
        logger.info("Wrote %d pairs to %s", len(entries), path)
        write_summary(
            self.output_path(SUMMARY_NAME),
            {
                "command": self.command,
                "mode": self.mode,
                "pairs": len(entries),
                "reward_gap": summarize_rewards(gaps) if gaps else None,
            },
        )
        return entries

    def _best_of_n(self):
        task = self.task_impl
        oracle = make_oracle(self.params, self.model_config)
        ensure_dir(self.output_path("pairs"))
        entries, gaps = [], []
        with self.deterministic():
            for k, prompt in enumerate(task.prompts()):
                label, _, condition = prompt
                first = self.seed + k * self.candidates
                seeds = [first + j for j in range(self.candidates)]
                canvases = generate(
                    oracle,
                    task,
                    prompt,
                    seeds,
                    self.noise_schedule,
                    mode=self.sample_mode,
                    dtype=self.torch_dtype,
                )
                rewards = np.array([task.reward(c, label, condition) for c in canvases])
                entry = {"prompt": label}
                for side, index in (
                    ("win", int(np.argmax(rewards))),
                    ("lose", int(np.argmin(rewards))),
                ):
                    name = f"pairs/{k:04d}_{side}.pgm"
                    write_pgm(self.output_path(name), canvases[index])
                    entry[side] = {"pgm": name}
                entries.append(entry)
                gaps.append(float(rewards.max() - rewards.min()))
        return entries, gaps
