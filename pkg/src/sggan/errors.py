"""Exception types shared across the toolkit."""


class ConfigError(ValueError):
    """Invalid configuration, grouping table, or experiment setup."""


class ShapeError(ValueError):
    """Tensor or image dimensions violate an operation's contract."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class IngestError(OSError):
    """An input file is missing or cannot be decoded."""


class AlignmentError(ValueError):
    """A thermal/visible pair does not share dimensions."""


class LoadError(RuntimeError):
    """A checkpoint or state file is corrupt, foreign, or incompatible."""


class TrainingError(RuntimeError):
    """Training cannot proceed (diverged loss, insufficient data)."""
