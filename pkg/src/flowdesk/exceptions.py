class FlowdeskException(Exception):  # noqa: N818
    """
    Base class for exceptions from the flowdesk package.
    """


class FlowdeskExitException(FlowdeskException):
    """
    An exception that carries an exit status that is
    returned by flowdesk CLI tools.
    """

    def __init__(self, exit_status, *args):
        super().__init__(exit_status, *args)
        self._exit_status = exit_status

    @property
    def exit_status(self):
        return self._exit_status


class ValidationError(FlowdeskException):
    """
    Error indicating an invalid run configuration.
    """


class ShapeError(FlowdeskException, ValueError):
    """
    Array operands do not have compatible shapes.
    """


class DimensionError(FlowdeskException, ValueError):
    """
    A grid dimension is zero or negative.
    """


class DomainError(FlowdeskException, ValueError):
    """
    A scalar argument lies outside the domain of an operation
    (for example a time below the SDE time floor).
    """


class DegenerateDensityError(FlowdeskException, ValueError):
    """
    A Gaussian transition density was requested with zero variance.
    """


class VocabError(FlowdeskException, ValueError):
    """
    A prompt token id is outside the model vocabulary.
    """


class CharsetError(FlowdeskException, KeyError):
    """
    A character has no glyph template in the charset.
    """

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class EditOpError(FlowdeskException, ValueError):
    """
    Unknown edit operation.
    """


class GroupSizeError(FlowdeskException, ValueError):
    """
    A GRPO group has fewer than two members.
    """


class NumericError(FlowdeskException, ArithmeticError):
    """
    A loss or objective evaluated to a non-finite value.
    """


class ParseError(FlowdeskException, ValueError):
    """
    A line of an input file could not be parsed.

    Parameters
    ----------
    path : str
        File being parsed.
    lineno : int
        1-based line number.
    reason : str
        What went wrong.
    """

    def __init__(self, path, lineno, reason):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.path = path
        self.lineno = lineno
        self.reason = reason


class CheckpointError(FlowdeskException):
    """
    Base class for checkpoint read errors.
    """


class CorruptCheckpointError(CheckpointError):
    """
    Bad magic bytes, unreadable header, or inconsistent tensor table.
    """


class TruncatedCheckpointError(CheckpointError):
    """
    The checkpoint file ends before all declared bytes were read.
    """


class CheckpointVersionError(CheckpointError):
    """
    Unsupported format version, or a checkpoint written for a
    different model configuration.
    """


class ConfigMismatchError(CheckpointVersionError):
    """
    The checkpoint header disagrees with the expected model
    configuration.  ``field`` names the first differing key.
    """

    def __init__(self, field, expected, found):
        super().__init__(
            f"Checkpoint config mismatch in field {field!r}: "
            f"expected {expected!r}, found {found!r}"
        )
        self.field = field
        self.expected = expected
        self.found = found


class GradientCheckError(FlowdeskException):
    """
    Analytic gradients disagree with finite differences.
    """
