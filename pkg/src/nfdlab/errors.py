"""Exception types shared across the package."""


class NfdlabError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(NfdlabError):
    """Array shapes do not agree with the declared configuration."""


class DomainError(NfdlabError):
    """An argument is outside its mathematical domain."""


class NotPositiveDefinite(NfdlabError):
    """A matrix that must be SPD failed factorization at every jitter level."""


class ConfigError(NfdlabError):
    """An invalid or inconsistent configuration value."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class TraceMismatch(NfdlabError):
    """A forward/backward trace does not belong to the given parameters."""


class SpdViolation(NfdlabError):
    """An empirical covariance matrix lost positive definiteness.

    Carries the (time index, iteration) location of the failure.
    """

    def __init__(self, message, t_idx=None, iteration=None):
        super().__init__(message)
        self.t_idx = t_idx
        self.iteration = iteration


class FormatError(NfdlabError):
    """A binary input file does not follow the expected layout."""


class EmptyDataset(NfdlabError):
    """An operation requires a non-empty dataset."""
