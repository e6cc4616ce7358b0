"""Exception hierarchy shared by every module of the package."""


class TradiError(Exception):
    """Base class for all package errors."""


class ConfigError(TradiError, ValueError):
    """Invalid architecture, hyperparameters or experiment configuration."""


class ContractError(TradiError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class NumericError(TradiError, ArithmeticError):
    """A computation produced non-finite values or failed to factorize."""


class NumericOverflowError(NumericError):
    def __init__(self, layer_index, message=None):
        self.layer_index = layer_index
        super().__init__(message or f"non-finite activation at layer {layer_index}")


class DataFormatError(TradiError, ValueError):
    """A dataset or dump file could not be parsed."""
