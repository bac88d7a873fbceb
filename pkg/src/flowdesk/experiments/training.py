"""
Training commands: flow matching, DPO and GRPO.
"""

import json
import logging
import time
from collections import OrderedDict
from contextlib import contextmanager

import numpy as np
import torch

from ..evaluation import evaluate_rewards, prompt_condition, summarize_rewards
from ..exceptions import NumericError, ValidationError
from ..flowcore import sample_timestep
from ..net import gradient, init_params, make_oracle
from ..objectives import (
    as_tensor,
    batch_condition,
    dpo_objective,
    draw_flow,
    flow_matching_objective,
    grpo_terms,
    trajectory_terms,
)
from ..pairs import pair_batch, read_pairs
from ..pipeline import DataPipeline
from ..preference import Group
from ..sampler import sample_group
from .base import METRICS_NAME, ExperimentStep, MetricsWriter

__all__ = ["TrainDpoStep", "TrainFlowMatchingStep", "TrainGrpoStep"]

logger = logging.getLogger(__name__)

SUMMARY_NAME = "summary.json"


def clone_params(params):
    return OrderedDict((name, p.detach().clone()) for name, p in params.items())


class _TrainingStep(ExperimentStep):
    """Optimization loop helpers."""

    columns = ()

    @contextmanager
    def keep_last_good(self, params):
        """
        On a numeric failure, save ``params`` (not yet updated by the
        failing step) as the checkpoint and re-raise.
        """
        try:
            yield
        except NumericError as err:
            logger.error("Aborting %s: %s", self.command, err)
            self.save_params(params, aborted=True)
            raise

    def metrics(self):
        return MetricsWriter(self.output_path(METRICS_NAME), self.columns)


class TrainFlowMatchingStep(_TrainingStep):
    """
    Train the velocity model with the flow-matching loss on batches pulled
    from the producer-consumer pipeline.
    """

    command = "train-fm"
    columns = ("step", "loss", "grad_norm", "wall_ms")

    spec = """
    init_checkpoint = input_file(default=None)  # Start from these parameters instead of a fresh init
    """  # noqa: E501

    def check_inputs(self):
        if self.init_checkpoint:
            self.initial_params = self.load_params(self.init_checkpoint)
        else:
            self.initial_params = None

    def process(self):
        self.prepare_output()
        dtype = self.torch_dtype
        config = self.model_config
        with self.deterministic():
            params = self.initial_params or init_params(config, self.seed, dtype=dtype)
            optimizer = self.make_optimizer(params)
            gen = self.generator(stream=1)
            pipeline = DataPipeline(
                self.task_impl,
                self.pipeline_config,
                self.seed,
                self.batch_size,
                limit=self.steps,
            )
            with self.metrics() as metrics, pipeline, self.keep_last_good(params):
                for step, item in enumerate(pipeline):
                    start = time.perf_counter()
                    batch = item.payload
                    x0 = as_tensor(batch.latents, dtype)
                    condition = batch_condition(batch, dtype)
                    draw = draw_flow(self.timestep_dist, x0.shape, gen, dtype)
                    loss, grads = gradient(
                        params,
                        lambda p, x0=x0, condition=condition, draw=draw: (
                            flow_matching_objective(p, config, x0, condition, draw)
                        ),
                    )
                    grad_norm = self.apply_gradients(params, grads, optimizer)
                    metrics.write(
                        step=step,
                        loss=float(loss),
                        grad_norm=grad_norm,
                        wall_ms=self.wall_ms(start),
                    )
                    self.log_progress(step, loss=float(loss), grad_norm=grad_norm)
        self.save_params(params, steps=self.steps)
        return params


class TrainDpoStep(_TrainingStep):
    """
    Fine-tune a checkpoint on preference pairs with the flow-matching DPO
    loss; the checkpoint itself is the frozen reference.
    """

    command = "train-dpo"
    columns = ("step", "loss", "margin", "grad_norm", "wall_ms")

    spec = """
    checkpoint = input_file(default=None)  # Reference and starting parameters
    pairs = input_file(default=None)  # JSON-lines preference pairs
    """

    def check_inputs(self):
        if not self.checkpoint or not self.pairs:
            raise ValidationError("train-dpo needs both a checkpoint and a pairs file")
        if not self.task_impl.has_reward:
            raise ValidationError(f"the {self.task} task has no preference pairs")
        self.reference = self.load_params(self.checkpoint)
        self.records = read_pairs(self.pairs, self.task_impl)
        if not self.records:
            raise ValidationError(f"{self.pairs} holds no pairs")
        shapes = {r.win.shape for r in self.records}
        if len(shapes) != 1:
            raise ValidationError(f"pairs mix image shapes {sorted(shapes)}")
        self.task_impl.patchifier.grid(*shapes.pop()[:2])

    def process(self):
        self.prepare_output()
        dtype = self.torch_dtype
        config = self.model_config
        beta = self.rl_config.beta_dpo
        with self.deterministic():
            policy = clone_params(self.reference)
            optimizer = self.make_optimizer(policy)
            gen = self.generator(stream=1)
            rng = np.random.default_rng([self.seed, 2])
            size = min(self.batch_size, len(self.records))
            with self.metrics() as metrics, self.keep_last_good(policy):
                for step in range(self.steps):
                    start = time.perf_counter()
                    index = rng.choice(len(self.records), size=size, replace=False)
                    pair = pair_batch(
                        [self.records[i] for i in index], self.task_impl, dtype
                    )
                    t = sample_timestep(self.timestep_dist, gen, size=size, dtype=dtype)
                    noise_win = torch.randn(pair.win.shape, generator=gen, dtype=dtype)
                    noise_lose = torch.randn(
                        pair.lose.shape, generator=gen, dtype=dtype
                    )
                    terms = []

                    def closure(p, pair=pair, t=t, nw=noise_win, nl=noise_lose):
                        terms[:] = [
                            dpo_objective(
                                p, self.reference, config, pair, t, nw, nl, beta
                            )
                        ]
                        return terms[0].loss

                    loss, grads = gradient(policy, closure)
                    margin = float(terms[0].margin.detach().mean())
                    grad_norm = self.apply_gradients(policy, grads, optimizer)
                    metrics.write(
                        step=step,
                        loss=float(loss),
                        margin=margin,
                        grad_norm=grad_norm,
                        wall_ms=self.wall_ms(start),
                    )
                    self.log_progress(step, loss=float(loss), margin=margin)
        self.save_params(policy, steps=self.steps)
        return policy


class TrainGrpoStep(_TrainingStep):
    """
    Online GRPO on the task reward.  Each iteration samples a group of SDE
    trajectories per prompt, standardizes the rewards within every group and
    takes ``rl.inner_epochs`` gradient steps on the clipped objective, with a
    per-step KL penalty to the frozen checkpoint.  A paired evaluation of
    policy and reference closes the run.
    """

    command = "train-grpo"
    columns = (
        "step",
        "loss",
        "mean_reward",
        "mean_kl",
        "clip_fraction",
        "grad_norm",
        "wall_ms",
    )

    spec = """
    checkpoint = input_file(default=None)  # Reference and starting parameters
    workers = integer(min=1, default=1)  # Threads sampling one group
    eval_seeds = integer(min=0, default=4)  # Seeds per prompt in the final paired evaluation
    eval_mode = option('ode', 'sde', default='sde')  # Sampler of the final evaluation
    """  # noqa: E501

    def check_inputs(self):
        if not self.checkpoint:
            raise ValidationError("train-grpo needs a checkpoint")
        if not self.task_impl.has_reward:
            raise ValidationError(f"the {self.task} task defines no reward")
        if not self.noise_schedule.sigma > 0:
            raise ValidationError(
                "train-grpo needs schedule.sigma > 0; ODE steps have no density"
            )
        self.reference = self.load_params(self.checkpoint)

    def _rollouts(self, oracle, prompts, rng):
        task = self.task_impl
        dtype = self.torch_dtype
        groups, old_logprobs = [], []
        for index in rng.choice(
            len(prompts),
            size=min(self.rl_config.prompts_per_iteration, len(prompts)),
            replace=False,
        ):
            label, _, canvas = prompts[index]
            condition = prompt_condition(task, prompts[index], dtype)
            rows, cols = condition.grid
            trajectories = sample_group(
                oracle,
                condition,
                (1, rows * cols, task.patchifier.token_dim),
                self.noise_schedule,
                base_seed=int(rng.integers(2**62)),
                size=self.rl_config.group_size,
                workers=self.workers,
                dtype=dtype,
            )
            finals = np.stack([tr.final[0].numpy() for tr in trajectories])
            images = task.patchifier.decode(finals, condition.grid)
            rewards = [task.reward(image, label, canvas) for image in images]
            group = Group(condition, trajectories, rewards)
            with torch.no_grad():
                old, _ = trajectory_terms(
                    oracle, trajectories, condition, self.noise_schedule
                )
            groups.append(group)
            old_logprobs.append(old)
        return groups, old_logprobs

    def process(self):
        self.prepare_output()
        config = self.model_config
        prompts = self.task_impl.prompts()
        with self.deterministic():
            policy = clone_params(self.reference)
            optimizer = self.make_optimizer(policy)
            rng = np.random.default_rng([self.seed, 3])
            with self.metrics() as metrics, self.keep_last_good(policy):
                for step in range(self.steps):
                    start = time.perf_counter()
                    oracle = make_oracle(policy, config)
                    groups, olds = self._rollouts(oracle, prompts, rng)
                    mean_reward = float(np.mean([g.rewards for g in groups]))
                    for _ in range(self.rl_config.inner_epochs):
                        terms = []

                        def closure(p, groups=groups, olds=olds):
                            terms[:] = [
                                grpo_terms(
                                    p,
                                    self.reference,
                                    config,
                                    group,
                                    old,
                                    self.noise_schedule,
                                    self.rl_config,
                                )
                                for group, old in zip(groups, olds)
                            ]
                            return torch.stack([term.loss for term in terms]).mean()

                        loss, grads = gradient(policy, closure)
                        grad_norm = self.apply_gradients(policy, grads, optimizer)
                    mean_kl = float(np.mean([term.mean_kl for term in terms]))
                    clip_fraction = float(
                        np.mean([term.clip_fraction for term in terms])
                    )
                    if not np.isfinite(mean_kl):
                        raise NumericError(f"mean KL is not finite at step {step}")
                    metrics.write(
                        step=step,
                        loss=float(loss),
                        mean_reward=mean_reward,
                        mean_kl=mean_kl,
                        clip_fraction=clip_fraction,
                        grad_norm=grad_norm,
                        wall_ms=self.wall_ms(start),
                    )
                    self.log_progress(
                        step, loss=float(loss), mean_reward=mean_reward, mean_kl=mean_kl
                    )
            self.save_params(policy, steps=self.steps)
            summary = self.paired_evaluation(policy, prompts)
        with open(self.output_path(SUMMARY_NAME), "w", encoding="utf-8") as fd:
            json.dump(summary, fd, indent=2, sort_keys=True)
            fd.write("\n")
        return policy

    def paired_evaluation(self, policy, prompts):
        """Rewards of policy and reference on identical prompts and seeds."""
        seeds = [self.seed + i for i in range(self.eval_seeds)]
        rewards = {}
        for name, params in (("reference", self.reference), ("policy", policy)):
            rewards[name] = evaluate_rewards(
                make_oracle(params, self.model_config),
                self.task_impl,
                prompts,
                seeds,
                self.noise_schedule,
                mode=self.eval_mode,
            )
        summary = {name: summarize_rewards(r) for name, r in rewards.items()}
        if rewards["policy"].size:
            summary["improvement"] = float(
                (rewards["policy"] - rewards["reference"]).mean()
            )
            logger.info(
                "Paired evaluation: reference %.4f, policy %.4f",
                summary["reference"]["mean"],
                summary["policy"]["mean"],
            )
        else:
            summary["improvement"] = None
        summary["mode"] = self.eval_mode
        summary["seeds"] = seeds
        summary["prompts"] = [label for label, _, _ in prompts]
        return summary
