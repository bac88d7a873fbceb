"""
The gradient-check command.
"""

import json
import logging

from ..exceptions import ValidationError
from ..gradcheck import (
    DEFAULT_ENTRIES,
    DEFAULT_STEP,
    DEFAULT_THRESHOLD,
    raise_on_failure,
    run_gradcheck,
)
from .base import ExperimentStep

__all__ = ["GradCheckStep"]

logger = logging.getLogger(__name__)

REPORT_NAME = "report.json"


class GradCheckStep(ExperimentStep):
    """
    Compare the analytic gradients of the flow-matching, DPO and GRPO losses
    with central finite differences in float64.

    ``report.json`` is written before a failing check raises
    `~flowdesk.exceptions.GradientCheckError`.
    """

    command = "gradcheck"

    spec = f"""
    entries = integer(min=1, default={DEFAULT_ENTRIES})  # Parameter entries checked per loss
    fd_step = float(min=0, default={DEFAULT_STEP})  # Central-difference step
    threshold = float(min=0, default={DEFAULT_THRESHOLD})  # Maximum relative error
    """  # noqa: E501

    #: Optional hook applied to the analytic gradients before comparison.
    corrupt = None

    def check_inputs(self):
        if not self.noise_schedule.sigma > 0:
            raise ValidationError(
                "gradcheck needs schedule.sigma > 0 for the GRPO loss"
            )

    def process(self):
        self.prepare_output()
        with self.deterministic():
            report = run_gradcheck(
                self.task_impl,
                self.model_config,
                self.noise_schedule,
                self.rl_config,
                self.timestep_dist,
                self.seed,
                n_entries=self.entries,
                step=self.fd_step,
                threshold=self.threshold,
                corrupt=self.corrupt,
            )
        with open(self.output_path(REPORT_NAME), "w", encoding="utf-8") as fd:
            json.dump(
                {name: result.to_dict() for name, result in report.items()},
                fd,
                indent=2,
                sort_keys=True,
            )
            fd.write("\n")
        raise_on_failure(report)
        return report
