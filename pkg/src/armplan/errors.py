"""Exception types shared across the toolkit."""


class ConfigError(ValueError):
    """Malformed configuration; the message carries the offending field path."""


class NoDataError(RuntimeError):
    """An operation that needs stored samples was called with none available."""


class GenerationError(RuntimeError):
    """Trajectory generation could not produce enough accepted samples."""


class NumericError(ArithmeticError):
    """Non-finite values reached an optimizer or loss computation."""
