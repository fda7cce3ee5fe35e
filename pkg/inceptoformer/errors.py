"""Exception classes shared by every module.

Each class carries the process exit code the CLI returns for it.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class InceptoFormerError(Exception):
    exit_code = 1


class ConfigError(InceptoFormerError, ValueError):
    exit_code = EXIT_CONFIG


class DimensionError(InceptoFormerError, ValueError):
    exit_code = EXIT_CONFIG


class ContractError(InceptoFormerError, RuntimeError):
    exit_code = EXIT_CONFIG


class DataFormatError(InceptoFormerError, ValueError):
    exit_code = EXIT_DATA


class LabelingError(DataFormatError):
    pass


class OversamplingError(DataFormatError):
    pass


class SplitError(DataFormatError):
    pass


class LabelIndexError(InceptoFormerError, IndexError):
    exit_code = EXIT_DATA


class NumericalError(InceptoFormerError, ArithmeticError):
    exit_code = EXIT_NUMERICAL


class NumericalInstabilityError(NumericalError):
    """Non-finite value met while checking gradients."""

    def __init__(self, message, parameter_index=None):
        super().__init__(message)
        self.parameter_index = parameter_index
