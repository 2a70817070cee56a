"""Exception hierarchy shared by the pipeline stages.

Each exception carries the CLI exit code it maps to so the command layer
can translate failures without a lookup table.
"""


class StdkError(Exception):
    exit_code = 1


class InvalidArgumentError(StdkError, ValueError):
    exit_code = 4


class ParseError(StdkError, ValueError):
    exit_code = 4

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConflictError(StdkError, ValueError):
    exit_code = 4


class EmptyInputError(StdkError, ValueError):
    exit_code = 4


class DegenerateDataError(StdkError, ValueError):
    exit_code = 5


class InsufficientDataError(StdkError, ValueError):
    exit_code = 4


class ShapeError(StdkError, ValueError):
    exit_code = 4


class NumericError(StdkError, ArithmeticError):
    exit_code = 5


class InvalidIntervalError(StdkError, ValueError):
    exit_code = 4


class EmptyEvaluationError(StdkError, ValueError):
    exit_code = 4


class MissingInputError(StdkError, FileNotFoundError):
    exit_code = 2


class ProvenanceError(StdkError):
    exit_code = 3


class FormatError(StdkError, ValueError):
    exit_code = 4
