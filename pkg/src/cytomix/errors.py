"""Exception types shared across the package."""


class CytomixError(Exception):
    """Base class for all package errors."""


class SchemaError(CytomixError):
    """A required column or config key is missing or unrecognized."""


class ValidationError(CytomixError):
    """Data violates an invariant (e.g. negative or non-integer counts)."""


class FactorError(CytomixError):
    """The condition factor does not have exactly two observed levels."""


class NotFoundError(CytomixError):
    """A requested label (cell type, marker, donor) is absent."""


class ParameterError(CytomixError):
    """An argument is outside its valid range."""


class DomainError(CytomixError, ValueError):
    """A density was evaluated outside its support."""


class PairingError(CytomixError):
    """The design is not paired: some donor lacks one of the two conditions."""


class ConfigError(CytomixError):
    """A run configuration is invalid."""
