"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class StateError(RuntimeError):
    """Operation called in a state that does not allow it (e.g. step after done)."""
