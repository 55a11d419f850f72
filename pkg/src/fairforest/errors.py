"""Exception types shared across the package."""


class FairForestError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(FairForestError):
    """A configuration value is out of its documented range."""


class ShapeError(FairForestError):
    """An array argument has the wrong shape for the operation."""


class DomainError(FairForestError):
    """A label, group, or key is outside the configured domain."""


class DataError(FairForestError):
    """An input stream or file is malformed."""


class NumericalError(FairForestError):
    """A computation produced a non-finite intermediate value."""
