"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions incompatible with the requested operation."""


class DomainError(ValueError):
    """Input value outside the mathematically valid domain of an operation."""


class OrderError(ValueError):
    """Time arguments violate the required ordering (e.g. s >= t)."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class TrainingFault(RuntimeError):
    """Non-finite loss or gradient encountered during training."""


class UsageError(ValueError):
    """Bad command-line usage (maps to exit code 1)."""
