"""Exception hierarchy shared across the package."""


class CFWDError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(CFWDError, ValueError):
    pass


class MissingFile(CFWDError, FileNotFoundError):
    pass


class UnsupportedFormat(CFWDError, ValueError):
    pass


class CorruptData(CFWDError, ValueError):
    pass


class WriteFailure(CFWDError, OSError):
    pass


class InvalidImage(CFWDError, ValueError):
    """Raised when a tensor violates the image-valued contract ([0, 1], finite)."""


class PatchTooLarge(CFWDError, ValueError):
    pass


class ImageTooSmall(CFWDError, ValueError):
    pass


class EmptyDataset(CFWDError, ValueError):
    pass


class OddDimensions(CFWDError, ValueError):
    pass


class IndivisibleDimensions(CFWDError, ValueError):
    pass


class LevelMismatch(CFWDError, ValueError):
    pass


class EmptyList(CFWDError, ValueError):
    pass


class InvalidRange(CFWDError, ValueError):
    pass


class StepOutOfRange(CFWDError, ValueError):
    pass


class StepCountInvalid(CFWDError, ValueError):
    pass


class InvalidArchitecture(CFWDError, ValueError):
    pass


class DegenerateEmbedding(CFWDError, ValueError):
    pass


class EmbedderUnavailable(CFWDError, RuntimeError):
    pass


class ConfigError(CFWDError, ValueError):
    pass


class CheckpointMismatch(CFWDError, ValueError):
    pass


class NonFiniteLoss(CFWDError, FloatingPointError):
    """Training produced a NaN/Inf loss. ``state`` carries the diagnostic dump."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}
