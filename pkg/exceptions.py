# exceptions.py
"""Error types raised across the segmentation engine.

Library code raises these; only the command line turns them into exit codes.
"""


class SegNetError(Exception):
    """Base class for every error the engine raises on purpose."""


class ShapeError(SegNetError, ValueError):
    """Tensor extents do not satisfy an operation's contract."""


class NonFiniteError(SegNetError, FloatingPointError):
    """A forward op produced NaN or Inf."""


class StaleTapeError(SegNetError, RuntimeError):
    """A tensor refers to a tape that has since been cleared."""


class ConfigError(SegNetError, ValueError):
    """Run configuration could not be parsed or validated."""

    def __init__(self, message, key=None, line=None):
        self.reason = message
        location = []
        if key is not None:
            location.append(f"key {key}")
        if line is not None:
            location.append(f"line {line}")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.key = key
        self.line = line


class CheckpointError(SegNetError, ValueError):
    """Checkpoint file is corrupt, of another version, or does not fit the model."""


class DataError(SegNetError, ValueError):
    """Dataset files are missing, undecodable or inconsistent."""


class TrainingError(SegNetError, RuntimeError):
    """Optimizer or stage plan was used outside its contract."""
