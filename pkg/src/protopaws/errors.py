"""Exception hierarchy shared by all modules.

Every error raised by this package derives from ProtopawsError so the CLI
can map failures onto its documented exit codes.
"""


class ProtopawsError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(ProtopawsError, ValueError):
    """Invalid configuration value or unreadable config file."""

    exit_code = 2


class ContractError(ProtopawsError, ValueError):
    """A caller violated an operation precondition (bad shapes, bounds, emptiness)."""

    exit_code = 2


class FormatError(ProtopawsError, ValueError):
    """A dataset or checkpoint file is malformed; the message names the failing field."""

    exit_code = 3


class NumericError(ProtopawsError, ArithmeticError):
    """A numeric failure: non-finite values, degenerate outputs, infinite losses."""

    exit_code = 4
