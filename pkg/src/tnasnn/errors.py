class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


class ConfigurationError(ValueError):
    """An experiment, network or policy configuration is invalid."""


class FormatError(ValueError):
    """A dataset or checkpoint file does not match its binary layout."""


class TrainingDiverged(RuntimeError):
    """The loss became non-finite during training."""
