"""Exception taxonomy shared across the package.

Every error a caller is expected to handle maps onto one of these classes;
the CLI translates them into stable exit codes (see cli.EXIT_CODES).
"""


class DriveSynthError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DriveSynthError):
    """Invalid configuration: bad dimensions, intervals, weights, unknown keys."""


class ShapeError(ConfigurationError):
    """Array arguments with inconsistent or unsupported shapes."""


class NumericError(DriveSynthError):
    """Non-finite values where finite ones are required."""


class UsageError(DriveSynthError):
    """A precondition on the call itself was violated (empty batch, empty mask...)."""


class JudgeError(DriveSynthError):
    """A judge returned an invalid, out-of-range, or unparseable response."""
