"""Exception types shared across the package."""


class JsegError(Exception):
    """Base class for all package errors."""


class ShapeError(JsegError):
    """Operands have incompatible or otherwise illegal shapes."""


class NumericError(JsegError):
    """A computation produced or would produce non-finite values."""


class ContractError(JsegError):
    """An operation was called in a state its contract forbids."""


class ConfigError(JsegError):
    """Invalid configuration or scenario description."""


class DataError(JsegError):
    """Malformed or missing input data on disk."""
