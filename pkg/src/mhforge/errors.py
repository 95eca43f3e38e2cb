"""Shared exception base so callers (and the CLI) can catch everything this package raises."""


class MhforgeError(ValueError):
    """Base class for all errors raised by mhforge."""
