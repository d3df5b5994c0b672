"""Exception hierarchy shared by every stage.

Each family carries the process exit code the CLI reports for it.
"""


class ReconError(Exception):
    exit_code = 1


class ConfigError(ReconError, ValueError):
    exit_code = 2


class ContractError(ConfigError):
    """A caller broke an input contract (missing data, empty inputs)."""


class ShapeError(ConfigError):
    pass


class DependencyError(ReconError):
    exit_code = 3


class NumericError(ReconError, ArithmeticError):
    exit_code = 4


class DomainError(NumericError):
    pass


class DegenerateInputError(NumericError):
    pass


class FactorizationError(NumericError):
    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class ConvergenceError(NumericError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class TrainingError(NumericError):
    pass


class StatisticsError(NumericError):
    pass


class FormatError(ReconError):
    exit_code = 4

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DatasetError(ReconError):
    exit_code = 4

    def __init__(self, message, sample_id=None):
        if sample_id is not None:
            message = f"sample {sample_id}: {message}"
        super().__init__(message)
        self.sample_id = sample_id
