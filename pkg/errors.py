"""Exception hierarchy shared by every module.

Each class carries the process exit code ``app.main`` maps it to:
0 success, 1 verification or training failure, 2 configuration error.
"""


class BenchError(Exception):
    """Base class of all errors raised on purpose by this package."""

    exit_code = 1


class DomainError(BenchError, ValueError):
    """Numerical input outside the domain of an operation."""


class GuardError(DomainError):
    """Request refused by a combinatorial guard (e.g. exhaustive search)."""


class ConfigError(BenchError):
    """Invalid or incompatible experiment configuration.

    :param message: What is wrong
    :type message: str
    :param field: Name of the offending configuration field
    :type field: str | None
    """

    exit_code = 2

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = "%s: %s" % (field, message)
        super().__init__(message)


class ParseError(BenchError, ValueError):
    """Malformed input file.

    :param message: What is wrong
    :type message: str
    :param line: 1-based line number in the input file
    :type line: int | None
    """

    exit_code = 2

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = "line %s: %s" % (line, message)
        super().__init__(message)


class TrainingDivergence(BenchError):
    """Loss became non-finite during training.

    :param step: Index of the failing training step
    :type step: int
    :param loss_name: Name of the loss being optimized
    :type loss_name: str
    :param value: The offending loss value
    :type value: float
    """

    def __init__(self, step, loss_name, value):
        self.step = step
        self.loss_name = loss_name
        self.value = value
        super().__init__("non-finite %s loss (%r) at step %s"
                         % (loss_name, value, step))


class GradCheckFailure(BenchError):
    """Loss evaluated to a non-finite value at a perturbed point.

    :param coordinate: ``(parameter name, flat index)`` that was perturbed
    :type coordinate: tuple
    """

    def __init__(self, coordinate, value):
        self.coordinate = coordinate
        self.value = value
        super().__init__("non-finite loss %r when perturbing %s[%s]"
                         % (value, coordinate[0], coordinate[1]))
