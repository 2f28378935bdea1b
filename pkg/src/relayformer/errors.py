"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible with an operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


class ConfigError(ValueError):
    """A configuration failed validation."""

class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
