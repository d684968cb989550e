"""Shared exception hierarchy.

Every error raised by this package derives from :class:`OpflowError` so
callers (and the CLI) can catch one type at the boundary.
"""


class OpflowError(Exception):
    """Base class for all package errors."""


class ConfigError(OpflowError):
    """A run configuration is missing, malformed, or references absent files."""
