"""Exception types shared across the library."""


class AdapterLabError(Exception):
    """Base class for all library errors."""


class InputError(AdapterLabError, ValueError):
    """Invalid input: bad values, ranges, ids, labels, or file contents."""


class DimensionError(InputError):
    """Operands or parameters with incompatible shapes."""


class CheckpointError(InputError):
    """Checkpoint file is corrupt, mismatched, or from an unsupported version."""


class ContractError(AdapterLabError, RuntimeError):
    """A caller broke an internal protocol, e.g. backward on a non-scalar,
    a gradient on a frozen parameter, or a missing classification token."""


class NumericError(AdapterLabError, ArithmeticError):
    """A computation produced NaN or Inf."""
