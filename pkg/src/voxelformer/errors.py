"""Exception types shared across the package."""


class VoxelFormerError(Exception):
    """Base class for all package errors."""


class ShapeError(VoxelFormerError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(VoxelFormerError, ValueError):
    """A precondition on argument values was violated."""


class GraphError(VoxelFormerError, RuntimeError):
    """The autodiff graph was used incorrectly (e.g. backward twice)."""


class ConfigError(VoxelFormerError, ValueError):
    """Invalid configuration."""


class NonFiniteError(VoxelFormerError, FloatingPointError):
    """A tensor contained NaN or Inf where finite values are required."""
