"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Invalid parameters, configuration, or data."""


class OracleInfeasibleError(ValidationError):
    """Instance is too large for the brute-force reference posterior."""


class SamplerError(RuntimeError):
    """The sampler could not run (e.g. no finite starting point)."""
