"""Exception hierarchy shared by every subpackage.

CLI exit codes map onto two families: :class:`ValidationError` (exit 1) and
:class:`NumericError` (exit 2).
"""


class AMCError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(AMCError, ValueError):
    """Input violates a documented precondition."""


class DimensionError(ValidationError):
    """Tensor shapes are incompatible for the requested operation."""


class DomainError(ValidationError):
    """Value outside the mathematical domain of an operation."""


class EmptyDomainError(DomainError):
    """Reduction or statistic over an empty set."""


class GraphError(AMCError, RuntimeError):
    """Autograd graph misuse (e.g. gradient w.r.t. an unreachable tensor)."""


class NumericError(AMCError, ArithmeticError):
    """NaN, overflow, or a zero-norm vector where a direction is required."""


class ParseError(ValidationError):
    """Malformed file content. ``location`` names the line or byte offset."""

    def __init__(self, message, location=None):
        super().__init__(message if location is None else f"{message} ({location})")
        self.location = location


class VocabularyError(ValidationError):
    """Word not present in the closed caption vocabulary."""


class AmbiguityError(ValidationError):
    """Annotation cannot be described uniquely within its scene."""


class GenerationError(AMCError, RuntimeError):
    """Scene generation gave up after its retry budget."""


class ChecksumError(ValidationError):
    """Checkpoint payload does not match its trailing CRC32."""


class IncompatibleVersionError(ValidationError):
    """Checkpoint written by an unsupported format version."""
