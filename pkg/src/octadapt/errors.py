"""Exception hierarchy shared across the package.

Each class maps to one failure category so the CLI can translate them
into distinct exit codes.
"""


class OctAdaptError(Exception):
    """Base class for all package errors."""


class ContractError(OctAdaptError):
    """An operation was called with arguments violating its precondition."""


class ConfigError(OctAdaptError):
    """A configuration object or file is invalid."""


class FormatError(OctAdaptError):
    """An on-disk container is corrupt, truncated, or inconsistent."""


class MissingInputError(OctAdaptError):
    """A required input artifact does not exist."""


class DivergenceError(OctAdaptError):
    """Training produced a non-finite loss value."""

    def __init__(self, message, epoch=None, step=None, component=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.component = component
