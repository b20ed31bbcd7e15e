"""Exception types shared across the codec."""


class CodecError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(CodecError, ValueError):
    """Input violates a documented precondition or invariant."""


class FormatError(CodecError):
    """A file header or section does not follow the expected layout."""


class CorruptionError(CodecError):
    """Checksum mismatch or an impossible value inside a coded stream."""


class TruncatedError(CodecError, OSError):
    """A file or stream ended before the declared payload."""


class SymbolRangeError(CodecError, OverflowError):
    """A quantized symbol does not fit the coder's raw 32-bit fallback."""


class TrainingError(CodecError, RuntimeError):
    """Optimization produced a non-finite value."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
