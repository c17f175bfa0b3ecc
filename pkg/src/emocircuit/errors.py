"""Exception types shared across the package.

The CLI maps these onto its exit codes: ``ValidationError`` -> 2,
``NumericError`` -> 3.
"""


class ShapeError(ValueError):
    """Tensor dimensions do not line up for an operation."""


class ValidationError(ValueError):
    """Input data violates a declared invariant."""


class NumericError(ArithmeticError):
    """A non-finite value reached a place that refuses it."""


class StateError(ValidationError):
    """A saved state file cannot be parsed or does not describe a state."""


class MigrationRefused(StateError):
    """A saved state was written by a different format version."""
