"""Exception hierarchy shared across the package.

The CLI maps each family to an exit code: configuration problems exit 2,
data problems exit 3 and numerical failures exit 4.
"""


class EchoDistillError(Exception):
    exit_code = 1


class ConfigError(EchoDistillError):
    exit_code = 2


class DataError(EchoDistillError):
    exit_code = 3


class NumericalError(EchoDistillError):
    exit_code = 4


class InputError(ConfigError, ValueError):
    pass


class ShapeError(DataError, ValueError):
    pass


class DegenerateTracing(DataError, ValueError):
    pass


class InvalidTracing(DataError, ValueError):
    pass


class ManifestError(DataError):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class PhantomConfigError(ConfigError, ValueError):
    pass


class DegeneratePhantom(NumericalError):
    pass


class BudgetError(ConfigError):
    def __init__(self, count, limit):
        super().__init__(f"parameter count {count} exceeds budget {limit}")
        self.count = count
        self.limit = limit


class DivergenceError(NumericalError):
    def __init__(self, epoch, step, value):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


class DegenerateSeries(NumericalError):
    pass


class DegenerateCalibration(UserWarning):
    pass


class DegenerateFit(UserWarning):
    pass
