"""
errors.py : exception hierarchy shared by every module.

The CLI maps each family onto an exit code:
  1  ConfigurationError, InvalidInputError, DimensionError
  2  InvariantViolation
  3  DataFileError
"""


class BanachSGDError(Exception):
    """Base class for all errors raised by this project."""


class ConfigurationError(BanachSGDError, ValueError):
    """Invalid parameters: exponents, schedules, batch counts, config keys."""


class InvalidInputError(BanachSGDError, ValueError):
    """Non-finite vectors, zero references and similar bad inputs."""


class DimensionError(BanachSGDError, ValueError):
    """Length, shape or block-index mismatch."""


class InvariantViolation(BanachSGDError, RuntimeError):
    """A runtime check on an iteration or a trace failed."""


class DataFileError(BanachSGDError, OSError):
    """A CSV or config file could not be read or is malformed."""


EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_INVARIANT = 2
EXIT_IO = 3


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, InvariantViolation):
        return EXIT_INVARIANT
    if isinstance(exc, (DataFileError, OSError)):
        return EXIT_IO
    if isinstance(exc, (ConfigurationError, InvalidInputError, DimensionError)):
        return EXIT_VALIDATION
    return EXIT_INVARIANT
