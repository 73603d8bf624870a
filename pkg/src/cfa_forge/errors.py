"""Exception types shared across the package."""


class CfaForgeError(Exception):
    """Base class for every error raised by cfa_forge."""


class ShapeError(CfaForgeError, ValueError):
    pass


class PatternError(CfaForgeError, ValueError):
    """Unknown CFA name, malformed pattern file, or a letter not in the color config."""


class ImageFormatError(CfaForgeError, ValueError):
    pass


class UnsupportedFormatError(ImageFormatError):
    pass


class TruncatedImageError(ImageFormatError):
    pass


class DatasetError(CfaForgeError):
    pass


class CheckpointError(CfaForgeError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class CorruptFileError(CheckpointError):
    """CRC mismatch on an otherwise complete file."""


class DivergenceError(CfaForgeError, FloatingPointError):
    def __init__(self, epoch, step, loss):
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.loss = loss


class ConfigError(CfaForgeError, ValueError):
    pass
