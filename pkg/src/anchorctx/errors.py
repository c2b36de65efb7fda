"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A call violated an operation precondition."""


class ConfigurationError(ValueError):
    """Invalid configuration or hyperparameters."""


class ValidationError(ValueError):
    """Data failed an invariant check."""


class DatasetParseError(ValueError):
    """A dataset file could not be parsed."""


class MissingDependencyError(RuntimeError):
    """A required upstream artifact (e.g. checkpoint) is absent."""
