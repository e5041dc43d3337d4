"""Exception types shared across the package."""


class DualTeacherError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(DualTeacherError, ValueError):
    pass


class DimensionError(DualTeacherError, ValueError):
    pass


class InputError(DualTeacherError, ValueError):
    pass


class StateError(DualTeacherError, RuntimeError):
    pass


class DatasetFormatError(DualTeacherError, ValueError):
    pass


class TrainingDivergenceError(DualTeacherError, FloatingPointError):
    """A loss or parameter became non-finite during training."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class ReportError(DualTeacherError, ValueError):
    pass
