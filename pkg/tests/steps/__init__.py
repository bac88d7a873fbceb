import logging

from flowdesk import Step
from flowdesk.exceptions import ValidationError

log = logging.getLogger("flowdesk.tests.steps")


class WithDefaultsStep(Step):
    """A step that contains defaults for each of its pars."""

    spec = """
    par1 = string(default='default par1 value')
    par2 = string(default='default par2 value')
    [section]
    depth = integer(min=0, default=3)
    label = string(default='inner')
    """

    def process(self, *args):  # noqa: D102
        log.info("Parameters par1=%s, par2=%s", self.par1, self.par2)
        return args


class ScaleStep(Step):
    """Scale a list of numbers."""

    spec = """
    factor = float() # Multiplier
    offset = float(default=0.0) # Added after scaling
    clip = boolean(default=False) # Clip results to [0, 1]
    """

    def validate(self):  # noqa: D102
        if self.clip and self.factor < 0:
            raise ValidationError("clip needs a non-negative factor")

    def process(self, values=()):  # noqa: D102
        result = [v * self.factor + self.offset for v in values]
        if self.clip:
            result = [min(max(v, 0.0), 1.0) for v in result]
        log.info("Scaled %d values", len(result))
        return result
