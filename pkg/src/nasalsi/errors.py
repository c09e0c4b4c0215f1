"""Exception hierarchy shared by every pipeline stage."""


class NasalSIError(Exception):
    """Base class for all errors raised by nasalsi."""


class InvalidCutoff(NasalSIError, ValueError):
    pass


class EmptyInput(NasalSIError, ValueError):
    pass


class RateTooLow(NasalSIError, ValueError):
    pass


class RateMismatch(NasalSIError, ValueError):
    pass


class DegenerateRange(NasalSIError, ValueError):
    """Raised when a corpus-wide min equals its max.

    ``kind`` names the trace kind (``"vp"``, ``"f0"``...) when known.
    """

    def __init__(self, message, kind=None):
        super().__init__(message)
        self.kind = kind


class ChannelMismatch(NasalSIError, ValueError):
    pass


class MissingChannel(NasalSIError, ValueError):
    pass


class FormatError(NasalSIError, ValueError):
    pass


class ShapeError(NasalSIError, ValueError):
    pass


class NumericError(NasalSIError, ArithmeticError):
    pass


class StateError(NasalSIError, RuntimeError):
    pass


class InvalidArgument(NasalSIError, ValueError):
    pass


class ZeroVariance(NasalSIError, ValueError):
    pass


class EmptyBatch(NasalSIError, ValueError):
    pass


class InsufficientSpeakers(NasalSIError, ValueError):
    pass


class DivisionByZero(NasalSIError, ZeroDivisionError):
    pass


class IoError(NasalSIError, OSError):
    pass


class RunExists(NasalSIError, FileExistsError):
    pass


class ManifestError(NasalSIError, ValueError):
    pass
