"""Error hierarchy shared by the library and the command line.

Every error knows the process exit code the CLI should return for it.
"""

from typing import Dict, Union

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class FishMergeError(Exception):
    exit_code = EXIT_DATA

    def to_json(self) -> Dict[str, Union[str, int]]:
        return {
            "error": type(self).__name__,
            "message": str(self),
            "exit_code": self.exit_code,
        }


class ConfigError(FishMergeError, ValueError):
    """Invalid spec, config or command-line usage."""

    exit_code = EXIT_USAGE


class DataFormatError(FishMergeError, ValueError):
    """Malformed input data or mismatched shapes."""

    exit_code = EXIT_DATA


class CheckpointFormatError(DataFormatError):
    pass


class CompatibilityError(DataFormatError):
    """Parameter sets that cannot be merged together."""


class NumericalError(FishMergeError, ArithmeticError):
    exit_code = EXIT_NUMERICAL


class SweepError(FishMergeError):
    """A grid point failed; carries the offending merging coefficients."""

    def __init__(self, lambdas, cause: Exception):
        self.lambdas = [float(v) for v in lambdas]
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", EXIT_DATA)
        super().__init__(f"sweep failed at lambdas {self.lambdas}: {cause}")
