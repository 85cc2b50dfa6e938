"""Exception hierarchy shared across the package."""


class DeepKissError(Exception):
    """Base class; ``category`` is the machine-readable tag the CLI reports."""

    category = "internal"


class ContractError(DeepKissError, ValueError):
    """A caller broke an operation's precondition (shapes, symmetry, ...)."""

    category = "contract"


class NumericalError(DeepKissError, ArithmeticError):
    """NaN/Inf in an iterate, or a factorization that failed after jitter."""

    category = "numerical"


class GridRangeError(DeepKissError, ValueError):
    """A point lies outside the interpolable part of the inducing lattice."""

    category = "grid"

    def __init__(self, msg, axis=None):
        super().__init__(msg)
        self.axis = axis


class CapacityError(DeepKissError, MemoryError):
    category = "capacity"


class TrainingError(DeepKissError, RuntimeError):
    category = "training"


class ConfigError(DeepKissError, ValueError):
    category = "config"

    def __init__(self, msg, key=None):
        super().__init__(msg)
        self.key = key


class FormatVersionError(DeepKissError, ValueError):
    category = "version"


class DataIOError(DeepKissError, OSError):
    """Unreadable, empty or malformed input file."""

    category = "io"
