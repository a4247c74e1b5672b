"""Shared exception base classes."""


class MorfError(Exception):
    """Base class for all platform errors."""


class ValidationFailure(MorfError):
    """A submission failed platform-side validation (plan, config, catalog)."""
