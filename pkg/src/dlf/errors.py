"""Exception hierarchy shared across the library."""


class DlfError(Exception):
    """Base class for all library errors."""


class ContractError(DlfError):
    """An operation was called with arguments violating its contract."""


class DomainError(DlfError):
    """Inputs were structurally valid but outside a numeric domain."""


class ConfigError(DlfError):
    """A model or run configuration is inconsistent."""


class DataError(DlfError):
    """A data file is missing, malformed, or out of range."""


class NumericError(DlfError):
    """A computation produced a non-finite intermediate."""
