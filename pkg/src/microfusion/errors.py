"""Exception types shared across the package.

The CLI maps these onto exit codes (see :mod:`microfusion.cli`), so new
error conditions should reuse one of the classes below instead of raising
bare exceptions.
"""


class MicrofusionError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(MicrofusionError, ValueError):
    """Operation received a value outside its documented domain."""


class ShapeError(InvalidInputError):
    """Array arguments have incompatible dimensions."""


class ConfigError(MicrofusionError, ValueError):
    """Configuration value missing, unknown, or inconsistent."""


class ParseError(MicrofusionError, ValueError):
    """A data file could not be parsed; carries the offending line."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TransportError(MicrofusionError, RuntimeError):
    """Live provider unreachable or timed out; safe to retry."""


class OfflineMissError(MicrofusionError, LookupError):
    """A cached response was required but absent; names the missing key."""

    def __init__(self, message, key):
        super().__init__(message)
        self.key = key


class DegenerateSimilarityError(MicrofusionError, ValueError):
    """Cosine similarity requested against a (near-)zero vector."""


class NumericalError(MicrofusionError, RuntimeError):
    """Non-finite value produced where a finite one is required."""
