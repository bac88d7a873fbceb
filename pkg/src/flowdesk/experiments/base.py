"""
Run-config plumbing shared by every experiment step.
"""

import csv
import logging
import os
import time
from contextlib import contextmanager

import numpy as np
import torch

from ..checkpoint import load_checkpoint, save_checkpoint
from ..exceptions import FlowdeskException, NumericError, ValidationError
from ..flowcore import TimestepDist
from ..net import ModelConfig
from ..pipeline import BucketKey, PipelineConfig
from ..preference import RLConfig
from ..sampler import NoiseSchedule
from ..step import Step
from ..tasks import GlyphSpec, MixtureSpec, make_task
from ..utilities import ensure_dir

__all__ = ["CHECKPOINT_NAME", "ExperimentStep", "MetricsWriter"]

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ffck"
CONFIG_NAME = "config.asdf"
METRICS_NAME = "metrics.csv"

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def format_value(value):
    """Platform-stable text for a metrics cell."""
    if isinstance(value, int | np.integer):
        return str(int(value))
    return f"{float(value):.9g}"


class MetricsWriter:
    """
    ``metrics.csv`` with a header row, flushed after every row.
    """

    def __init__(self, path, columns):
        self.path = path
        self.columns = list(columns)
        self._fd = open(path, "w", newline="", encoding="utf-8")  # noqa: SIM115
        self._writer = csv.writer(self._fd, lineterminator="\n")
        self._writer.writerow(self.columns)
        self._fd.flush()

    def write(self, **row):
        self._writer.writerow([format_value(row[c]) for c in self.columns])
        self._fd.flush()

    def close(self):
        self._fd.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ExperimentStep(Step):
    """
    Base class of the flowdesk commands.

    The spec below is the run config shared by all commands.  `validate`
    builds the typed sub-configs and the task and checks every cross-field
    constraint, so a bad config fails before any file is written.
    """

    spec = """
    task = option('mixture', 'glyph', 'edit', default='glyph')  # Toy task
    seed = integer(min=0, max=9223372036854775807, default=0)  # Seed fixed before any randomness
    steps = integer(min=0, default=200)  # Optimization steps
    batch_size = integer(min=1, default=16)  # Examples per optimization step
    dtype = option('float32', 'float64', default='float32')  # Tensor precision
    record_wall_time = boolean(default=False)  # Fill the wall_ms metric (breaks byte-identical reruns)
    log_interval = integer(min=1, default=50)  # Steps between progress messages
    [model]
    layers = integer(min=1, default=4)  # Double-stream blocks
    heads = integer(min=1, default=4)  # Attention heads
    head_dim = integer(min=2, default=16)  # Width of one head
    hidden = integer(min=1, default=None)  # Residual width; must equal heads * head_dim
    ffn_mult = float(min=0, default=4.0)  # Feed-forward expansion
    patch = integer(min=1, default=None)  # Patch side; None: 1 for mixture, else 2
    channels = integer(min=1, default=None)  # Pixel channels; None: from the task
    vocab = integer(min=1, default=None)  # Prompt vocabulary; None: from the task
    init_std = float(min=0, default=0.02)  # Truncated-normal init std
    [[rope]]
    base = float(min=1, default=10000.0)  # Rotary frequency base
    axis_split = int_list(default=list())  # Frame, row, col dims; empty: default split
    [schedule]
    steps = integer(min=1, default=10)  # Sampler steps T
    eps = float(min=0, max=1, default=0.001)  # Time floor at the noise end
    sigma = float(min=0, default=0.3)  # SDE diffusion magnitude
    sigma_shape = option('constant', 'linear', default='constant')  # sigma_t = a or a * max(t, 0.1)
    [rl]
    beta_dpo = float(min=0, default=1.0)  # DPO scale
    beta_kl = float(min=0, default=0.01)  # GRPO KL weight
    clip_eps = float(min=0, max=1, default=0.2)  # GRPO ratio clip
    group_size = integer(min=2, default=8)  # Trajectories per prompt
    inner_epochs = integer(min=1, default=1)  # Gradient steps per rollout batch
    prompts_per_iteration = integer(min=1, default=2)  # Prompts per GRPO iteration
    [timestep]
    loc = float(default=0.0)  # Logit-normal location
    scale = float(min=0, default=1.0)  # Logit-normal scale
    [pipeline]
    producers = integer(min=1, default=2)  # Producer threads
    capacity = integer(min=1, default=4)  # Channel capacity in batches
    buckets = bucket_list(default=list())  # HxW canvases; empty: task default
    [mixture]
    means = float_list(default=list(1.0, 1.0))  # Flat x, y pairs
    covariance = float_list(default=list(1.0, 0.0, 0.0, 1.0))  # Shared 2x2, row-major
    weights = float_list(default=list())  # Component weights; empty: uniform
    [glyph]
    charset = string(default='0123456789AEHOTX')  # Characters and their token order
    canvas = integer(min=7, default=16)  # Square canvas side
    placement = int_list(default=list())  # Glyph top, left; empty: centered
    ops = string_list(default=list('invert', 'hflip'))  # Edit operations
    [optim]
    name = option('adam', 'sgd', default='adam')  # First-order optimizer
    lr = float(min=0, default=0.001)  # Learning rate
    grad_clip = float(min=0, default=1.0)  # Global norm clip; 0 disables
    """  # noqa: E501

    #: CLI command name of the step.
    command = None

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]

    def output_path(self, name):
        return os.path.join(self.out_dir, name)

    def validate(self):
        try:
            self._build()
            self.check_inputs()
        except ValidationError:
            raise
        except FlowdeskException as err:
            raise ValidationError(str(err)) from err

    def _build(self):
        self.glyph_spec = GlyphSpec.from_section(self.glyph)
        self.mixture_spec = MixtureSpec.from_section(self.mixture)
        self.noise_schedule = NoiseSchedule.from_section(self.schedule)
        self.rl_config = RLConfig.from_section(self.rl)
        self.timestep_dist = TimestepDist.from_section(self.timestep)
        self.pipeline_config = PipelineConfig.from_section(self.pipeline)

        patch = self.model.get("patch")
        if patch is None:
            patch = 1 if self.task == "mixture" else 2
        self.task_impl = make_task(
            self.task,
            glyph_spec=self.glyph_spec,
            mixture_spec=self.mixture_spec,
            patch=patch,
            ops=tuple(self.glyph["ops"]),
        )
        patchifier = self.task_impl.patchifier
        self.model_config = ModelConfig.from_section(
            self.model,
            patch=patchifier.patch,
            channels=patchifier.channels,
            vocab=self.task_impl.vocab,
        )

        if self.model_config.patch != patchifier.patch:
            raise ValidationError(
                f"model.patch {self.model_config.patch} does not match the task "
                f"patch {patchifier.patch}"
            )
        if self.model_config.channels != patchifier.channels:
            raise ValidationError(
                f"model.channels must be {patchifier.channels} for the "
                f"{self.task} task, got {self.model_config.channels}"
            )
        if self.model_config.vocab < self.task_impl.vocab:
            raise ValidationError(
                f"model.vocab {self.model_config.vocab} does not cover the "
                f"{self.task_impl.vocab} prompt tokens of the {self.task} task"
            )
        for bucket in self.buckets:
            try:
                self.task_impl.sample_batch(np.random.default_rng(0), 0, bucket.shape)
            except FlowdeskException as err:
                raise ValidationError(f"bucket {bucket}: {err}") from err

    def check_inputs(self):
        """
        Load and check the input files of the command.  Runs after the
        config is built; any flowdesk error becomes a `ValidationError`.
        """

    @property
    def buckets(self):
        buckets = [BucketKey.parse(b) for b in self.pipeline["buckets"]]
        return buckets or [BucketKey(*b) for b in self.task_impl.default_buckets()]

    @contextmanager
    def deterministic(self):
        """Seed torch and force deterministic kernels for the run."""
        previous = torch.are_deterministic_algorithms_enabled()
        torch.manual_seed(self.seed)
        torch.use_deterministic_algorithms(True)
        try:
            yield
        finally:
            torch.use_deterministic_algorithms(previous)

    def prepare_output(self):
        """Create the output directory and save the effective config."""
        ensure_dir(self.out_dir)
        self.export_config(self.output_path(CONFIG_NAME))

    def generator(self, stream=0):
        gen = torch.Generator()
        gen.manual_seed((self.seed + stream) % 2**63)
        return gen

    def load_params(self, path):
        """Parameters of a checkpoint that must match the model config."""
        checkpoint = load_checkpoint(path, expected_config=self.model_config)
        return checkpoint.to_params(self.torch_dtype)

    def save_params(self, params, **meta):
        return save_checkpoint(
            self.output_path(CHECKPOINT_NAME),
            params,
            self.model_config,
            command=type(self).command,
            task=self.task,
            seed=self.seed,
            **meta,
        )

    def make_optimizer(self, params):
        tensors = list(params.values())
        if self.optim["name"] == "sgd":
            return torch.optim.SGD(tensors, lr=self.optim["lr"])
        return torch.optim.Adam(tensors, lr=self.optim["lr"])

    def apply_gradients(self, params, grads, optimizer):
        """
        Clip and apply ``grads``.

        Returns
        -------
        float
            Global gradient norm before clipping.

        Raises
        ------
        NumericError
            If the gradient is not finite; ``params`` are left untouched.
        """
        for name, p in params.items():
            p.grad = grads[name]
        tensors = list(params.values())
        if self.optim["grad_clip"] > 0:
            norm = torch.nn.utils.clip_grad_norm_(tensors, self.optim["grad_clip"])
        else:
            norm = torch.linalg.vector_norm(
                torch.stack([torch.linalg.vector_norm(p.grad) for p in tensors])
            )
        norm = float(norm)
        if not np.isfinite(norm):
            optimizer.zero_grad()
            raise NumericError(f"gradient norm is not finite: {norm}")
        optimizer.step()
        optimizer.zero_grad()
        return norm

    def wall_ms(self, start):
        if not self.record_wall_time:
            return 0
        return int(round((time.perf_counter() - start) * 1000))

    def log_progress(self, step, **values):
        if step % self.log_interval == 0 or step == self.steps - 1:
            logger.info(
                "%s step %d/%d: %s",
                type(self).command,
                step + 1,
                self.steps,
                ", ".join(f"{k}={format_value(v)}" for k, v in values.items()),
            )
