"""Exception taxonomy shared by all modules."""


class ShapeError(ValueError):
    """Tensor/kernel extents incompatible with the requested operation."""


class DtypeError(ValueError):
    """Mixed or unsupported dtypes in one operation."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration values."""


class ContractError(ValueError):
    """A documented precondition was violated (e.g. non-scalar loss)."""


class FormatError(ValueError):
    """Malformed or truncated serialized data."""


class GenerationError(RuntimeError):
    """Scene synthesis could not place a shape within the retry budget."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""
