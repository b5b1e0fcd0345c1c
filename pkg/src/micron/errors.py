"""Exception hierarchy shared across the package.

Each class carries a ``category`` used by the CLI for its
``ERROR(<category>):`` prefix.
"""


class MicronError(Exception):
    category = "internal"


class ConfigError(MicronError, ValueError):
    category = "config"


class ShapeError(MicronError, ValueError):
    category = "shape"


class NumericError(MicronError, ArithmeticError):
    category = "numeric"


class ParseError(MicronError, ValueError):
    """Malformed cohort or checkpoint file; ``lineno`` is 1-based when known."""

    category = "parse"

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class CalibrationError(MicronError):
    category = "calibration"


class EvaluationError(MicronError):
    category = "evaluation"
