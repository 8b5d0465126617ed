"""Exception types used across the package."""


class NpviError(Exception):
    """Base class for package errors."""


class InputError(NpviError, ValueError):
    """Invalid user-supplied data, configuration, or file contents."""


class NumericalError(NpviError, ArithmeticError):
    """A linear-algebra or optimization step failed numerically."""


class StateError(NpviError, RuntimeError):
    """An operation was called on an object in the wrong state."""
