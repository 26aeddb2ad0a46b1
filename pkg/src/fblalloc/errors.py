"""Exception types shared across the package.

All domain failures derive from FblError so the CLI can map them to a
single nonzero exit code while keeping messages specific.
"""


class FblError(Exception):
    """Base class for all domain errors raised by this package."""


class ConfigError(FblError):
    """Invalid configuration file or parameter value."""


class InfeasibleBlocklengthError(FblError):
    """No admissible repetition count exists for this blocklength."""


class InfeasibleLinkError(FblError):
    """The channel is too weak for any blocklength in the allowed range."""


class InfeasibleNetworkError(FblError):
    """No joint assignment fits inside the schedulability budget."""


class DatasetFormatError(FblError):
    """Dataset file is malformed or its version does not match."""


class CheckpointError(FblError):
    """Model checkpoint is malformed or incompatible with the request."""
