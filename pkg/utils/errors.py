"""Exception hierarchy shared by every package.

Each error carries the process exit code the CLI reports for it.
"""


class GridModelError(Exception):
    """Base class for all library errors."""
    exit_code = 2


class UsageError(GridModelError):
    exit_code = 1


class DataError(GridModelError):
    """Malformed files, inconsistent datasets, invalid sizes."""
    exit_code = 2


class GraphValidationError(GridModelError):
    exit_code = 2

    def __init__(self, message: str, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


class SchedulingError(GridModelError):
    exit_code = 2


class NumericalError(GridModelError):
    exit_code = 3


class InvertibilityError(NumericalError):
    pass


class ObservabilityError(NumericalError):
    def __init__(self, message: str, variables=None):
        super().__init__(message)
        self.variables = list(variables or [])


class DegeneracyError(NumericalError):
    pass


class InversionError(NumericalError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class TrainingError(NumericalError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class ConnectivityError(NumericalError):
    pass
