"""Exception hierarchy shared by every crowdcache module."""


class CrowdCacheError(Exception):
    """Base class for all package errors."""


class InvalidInputError(CrowdCacheError, ValueError):
    """Dimension mismatch, out-of-range index or invalid parameter."""


class UndefinedQuantityError(CrowdCacheError, ValueError):
    """A graph quantity was requested that is undefined (e.g. on a disconnected graph)."""


class SolverFailureError(CrowdCacheError, RuntimeError):
    """A solver could not produce a result."""


class StepSizeTooLargeError(SolverFailureError):
    """The iteration error blew up past the divergence guard."""


class ConfigError(CrowdCacheError, ValueError):
    """Malformed or invalid run configuration."""


class IngestionError(CrowdCacheError, ValueError):
    """A positions file could not be read."""
