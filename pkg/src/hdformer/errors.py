"""Exception hierarchy shared across the package."""


class HDFormerError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(HDFormerError, ValueError):
    pass


class NumericsError(HDFormerError, ValueError):
    """Non-finite values, division by zero and similar numeric faults."""


class TopologyError(HDFormerError, ValueError):
    """Invalid skeleton topology (cycles, orphans, multiple parents...)."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PathError(HDFormerError, ValueError):
    """Raised when a hyperbone query has no valid directed path."""


class DegeneratePathError(PathError):
    pass


class NoDirectedPathError(PathError):
    pass


class ConfigError(HDFormerError, ValueError):
    """Invalid configuration; ``key`` names the offending key path."""

    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class FormatError(HDFormerError, ValueError):
    """Malformed file contents."""


class VersionMismatchError(FormatError):
    pass


class TruncationError(FormatError):
    def __init__(self, expected, actual, what="payload"):
        self.expected = expected
        self.actual = actual
        super().__init__(f"truncated {what}: expected {expected} bytes, got {actual}")


class ChannelMismatchError(FormatError):
    pass


class TrainingDivergedError(HDFormerError, RuntimeError):
    """Loss or gradients became non-finite during training."""


class RecordingDisabledError(HDFormerError, RuntimeError):
    pass
