"""Exception types shared across the package."""


class CellsiftError(Exception):
    """Base class for all errors raised by this package."""


class InputError(CellsiftError):
    """Invalid argument values or malformed input data."""


class ShapeError(CellsiftError):
    """Data shape unsupported by the requested operation."""


class SingularityError(CellsiftError):
    """A matrix that must be positive definite is numerically singular."""


class ConvergenceError(CellsiftError):
    """An iterative routine exhausted its iteration budget."""
