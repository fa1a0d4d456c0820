"""Exception hierarchy shared across the package."""


class StepmaskError(Exception):
    """Base class for all package-specific errors."""


class InvalidInput(StepmaskError):
    """An argument violates an operation's precondition."""


class MissingEmbedding(StepmaskError):
    """Table-backed embedder has no entry for the requested text."""


class DimensionError(StepmaskError):
    """Array shapes or dimensions do not line up."""


class InvalidDistribution(StepmaskError):
    """A vector that must be a probability distribution is not one."""


class ConfigError(StepmaskError):
    """A configuration value is inconsistent or unsatisfiable."""


class ParseError(StepmaskError):
    """A file does not match its documented schema."""


class VocabularyMismatch(StepmaskError):
    """A label id does not exist in the governing vocabulary."""


class InvalidAnnotation(StepmaskError):
    """Step annotations violate timing or structural constraints."""


class CapacityError(StepmaskError):
    """Sequence longer than the model's positional capacity."""


class InvalidTarget(StepmaskError):
    """A training target is missing or malformed."""


class TraceError(StepmaskError):
    """Backward pass invoked without a matching forward trace."""


class SynthesisError(StepmaskError):
    """A benchmark instance cannot be synthesized from the given video."""


class DivergenceError(StepmaskError):
    """Training produced a non-finite loss.

    Carries the last finite parameter snapshot and partial report so the
    caller can checkpoint what was still good.
    """

    def __init__(self, message, params=None, report=None):
        super().__init__(message)
        self.params = params
        self.report = report
