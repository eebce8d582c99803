"""Exception and warning types raised across the package."""


class SdLatencyError(Exception):
    """Base class for all package errors."""


class StabilityError(SdLatencyError, ValueError):
    """Request rate is at or beyond the saturation point of the latency law."""

    def __init__(self, message, saturation_rate=None):
        super().__init__(message)
        self.saturation_rate = saturation_rate


class UnboundedError(SdLatencyError, ValueError):
    """No finite saturation rate exists (zero load-dependent cost)."""


class DegenerateError(SdLatencyError, ValueError):
    """A ratio or statistic is undefined for the given inputs."""


class NoStableConfigError(SdLatencyError):
    """Every candidate draft length saturates at the requested load."""


class NoStableSolutionError(SdLatencyError):
    """The MoE fixed-point equation has no stable root in the search bracket."""


class InsufficientDataError(SdLatencyError, ValueError):
    pass


class SingularJacobianError(SdLatencyError):
    pass


class NonConvergenceError(SdLatencyError):
    pass


class MissingInputError(SdLatencyError, ValueError):
    pass


class ParseError(SdLatencyError, ValueError):
    """Malformed input file; carries the offending line and column when known."""

    def __init__(self, message, line=None, column=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.column = column


class SchemaError(ParseError):
    pass


class ValidationError(ParseError):
    pass


class VersionError(ParseError):
    pass


class IdentifiabilityWarning(UserWarning):
    """Fitted parameters cannot be separated by the available data."""
