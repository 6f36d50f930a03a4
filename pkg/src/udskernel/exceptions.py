"""Exception types shared across the package."""


class InputError(ValueError):
    """Invalid argument or malformed input."""


class NumericalError(ArithmeticError):
    """A linear-algebra routine failed beyond the jitter tolerance."""


class DatasetError(InputError):
    """A dataset violates its structural invariants."""


class UnsupportedError(InputError):
    """Operation not available for this environment."""
