"""
The flowdesk commands, one `~flowdesk.step.Step` subclass each.
"""

from .base import ExperimentStep
from .checks import GradCheckStep
from .sampling import MakePairsStep, SampleStep
from .training import TrainDpoStep, TrainFlowMatchingStep, TrainGrpoStep

__all__ = [
    "COMMANDS",
    "ExperimentStep",
    "GradCheckStep",
    "MakePairsStep",
    "SampleStep",
    "TrainDpoStep",
    "TrainFlowMatchingStep",
    "TrainGrpoStep",
]

#: Step class of every CLI command, in help order.
COMMANDS = {
    cls.command: cls
    for cls in (
        TrainFlowMatchingStep,
        TrainDpoStep,
        TrainGrpoStep,
        SampleStep,
        MakePairsStep,
        GradCheckStep,
    )
}
