"""Exception types shared across the package."""


class SiteStreamError(Exception):
    """Base class for all errors raised by this package."""


class LayoutError(SiteStreamError):
    """Structural mismatch: incompatible vector layouts or array shapes."""


class ValidationError(SiteStreamError):
    """Invalid argument or configuration value."""


class DegenerateInputError(SiteStreamError):
    """Input is technically well-formed but the operation is undefined on it,
    e.g. the cosine of a zero vector or a single-element virtual split."""


class NumericError(SiteStreamError):
    """A non-finite value appeared where a finite one is required; the
    offending step is refused rather than applied."""


class MetricUndefinedError(SiteStreamError):
    """A metric has no defined value for this input (e.g. surface distance
    of an empty mask); callers record these as skips."""


class AuditError(SiteStreamError):
    """The data-access audit detected a read that violates the sequential
    privacy contract. Always a hard failure."""
