"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class SdabnError(Exception):
    exit_code = 1


class ConfigurationError(SdabnError, ValueError):
    """Bad shapes, bad hyperparameters, or an invalid experiment config."""

    exit_code = 2


class DataError(SdabnError, ValueError):
    """Malformed input data: out-of-range labels, unreadable images."""

    exit_code = 3


class CheckpointMismatchError(SdabnError):
    """A checkpoint does not fit the architecture it is loaded into."""

    exit_code = 4


class UsageError(SdabnError, RuntimeError):
    """API misuse: backward twice, missing prerequisites, bad ranges."""

    exit_code = 1


class NumericalError(SdabnError, FloatingPointError):
    """A forward pass produced NaN or infinity while strict mode was on."""

    exit_code = 1
