"""Exception hierarchy shared across the toolkit."""


class PathflowError(Exception):
    """Base class for all domain errors raised by this package."""


class ParseError(PathflowError):
    """Malformed input text (TNTP nets/trips, manifests, dump files)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NetworkValidationError(PathflowError):
    """A network, demand matrix or flow array violates a structural invariant."""


class ContractError(PathflowError):
    """Caller passed arrays/objects whose shapes or metadata do not line up."""


class InfeasiblePathError(PathflowError):
    """A path references a disabled or missing link."""


class NoFeasiblePathError(PathflowError):
    """A path set holds no usable (non-padded) path."""


class ScenarioInfeasibleError(PathflowError):
    """A perturbation leaves demanded OD pairs without any feasible path."""

    def __init__(self, message, pairs=()):
        super().__init__(message)
        self.pairs = tuple(pairs)


class InfeasibleInstanceError(PathflowError):
    """A demanded OD pair has no path, so equilibrium cannot be solved."""

    def __init__(self, message, pairs=()):
        super().__init__(message)
        self.pairs = tuple(pairs)


class UndefinedMetricError(PathflowError):
    """A metric was requested on an empty population (zero demand, no slots)."""


class ConfigError(PathflowError):
    """Invalid configuration value or option name."""


class SizeError(PathflowError):
    """Requested object exceeds the configured size limits."""
