"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class DegenerateRowError(ContractError):
    """A probability row has no retaining mass left to renormalize."""


class ConfigError(ValueError):
    """Invalid configuration value or file."""


class FormatError(ValueError):
    """A binary or text file does not match its documented layout."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


class UndefinedMetricError(ValueError):
    """A metric cannot be computed on the given inputs."""
