"""Exception types raised across the package."""


class SCLError(Exception):
    """Base class for all package errors."""


class ShapeError(SCLError, ValueError):
    pass


class ContractError(SCLError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(SCLError, ValueError):
    pass


class FormatError(SCLError, ValueError):
    """A file could not be parsed. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(SCLError, RuntimeError):
    pass
