"""Exception taxonomy shared by all modules."""


class McdenoiseError(Exception):
    """Base class for all package errors."""


class ConfigurationError(McdenoiseError):
    """Invalid parameters, specs, or experiment configuration."""


class DataError(McdenoiseError):
    """Input data violates a runtime contract (shape, sign, consistency)."""


class ParseError(DataError):
    """Malformed external file; message carries the offending location."""


class InvariantViolation(McdenoiseError):
    """An internal invariant was broken; indicates a bug upstream."""


class MissingDependencyError(McdenoiseError):
    """A pipeline stage requires an artifact that has not been produced."""


class TrainingError(McdenoiseError):
    """Model training failed (non-finite loss, arity mismatch, ...)."""
