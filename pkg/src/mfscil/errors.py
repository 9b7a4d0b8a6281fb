"""Error taxonomy shared across the package.

Each class maps to a process exit code so the CLI can translate failures
without inspecting messages.
"""


class MfscilError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(MfscilError):
    """Malformed or inconsistent configuration."""

    exit_code = 2


class DataError(MfscilError):
    """Corrupt, truncated, or mismatched data files."""

    exit_code = 3


class NumericError(MfscilError):
    """Non-finite values or failed numeric checks."""

    exit_code = 4
