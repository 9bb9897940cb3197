"""Exception taxonomy shared across the package.

Every error raised by library code derives from CompressionLabError so
callers can catch the whole family with one clause. Subclasses also
inherit from the closest stdlib builtin (ValueError, OSError, ...) so
generic handlers keep working.
"""


class CompressionLabError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(CompressionLabError, ValueError):
    """Operands have incompatible shapes. Message names both shapes."""


class ParameterError(CompressionLabError, ValueError):
    """A numeric argument is outside its documented range."""


class InputError(CompressionLabError, ValueError):
    """Input data violates a documented precondition (bad ids, dtype, ...)."""


class UsageError(CompressionLabError, RuntimeError):
    """API misuse: calling an operation in a state that cannot support it."""


class NumericError(CompressionLabError, ValueError):
    """A quantity that must be a distribution or finite value is not."""


class ConfigError(CompressionLabError, ValueError):
    """Invalid or missing configuration (files, env vars, field values)."""


class PrecisionStateError(CompressionLabError, RuntimeError):
    """Model precision state forbids the requested operation."""


class OrderingConstraintError(CompressionLabError, RuntimeError):
    """A stage would run under a precision state that cannot support it."""


class SequenceParseError(CompressionLabError, ValueError):
    """A pipeline sequence string could not be parsed."""


class PipelineValidationError(CompressionLabError, ValueError):
    """A pipeline spec violates ordering rules. Carries all violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class CheckpointFormatError(CompressionLabError, ValueError):
    """A checkpoint file is malformed. Message includes the byte offset."""


class TransportError(CompressionLabError, RuntimeError):
    """The judge endpoint was unreachable or kept failing."""


class ProtocolError(CompressionLabError, ValueError):
    """The judge endpoint replied with an unparseable or invalid payload."""
