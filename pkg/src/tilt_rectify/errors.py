"""Exception hierarchy shared by every module."""


class TiltRectifyError(Exception):
    """Base class for all package errors."""


class AntipodalInput(TiltRectifyError, ValueError):
    pass


class AntipodalDrift(TiltRectifyError, RuntimeError):
    """Raised by the optimizer when an iterate approaches -g.

    The partial objective trace is attached as ``trace``.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class BehindCamera(TiltRectifyError, ValueError):
    pass


class EstimatorShapeMismatch(TiltRectifyError, ValueError):
    pass


class EmptyInput(TiltRectifyError, ValueError):
    pass


class BinningMismatch(TiltRectifyError, ValueError):
    pass


class TooFewSamples(TiltRectifyError, ValueError):
    pass


class GradientUndefined(TiltRectifyError, ValueError):
    pass


class EmptyMask(TiltRectifyError, ValueError):
    pass


class NoValidSamples(TiltRectifyError, ValueError):
    pass


class DegenerateInput(TiltRectifyError, ValueError):
    pass


class EmptySeed(TiltRectifyError, ValueError):
    pass


class FileError(TiltRectifyError, OSError):
    pass


class FormatError(TiltRectifyError, ValueError):
    pass


class RangeError(TiltRectifyError, ValueError):
    pass


class SchemaError(TiltRectifyError, ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class ValidationError(TiltRectifyError, ValueError):
    pass
