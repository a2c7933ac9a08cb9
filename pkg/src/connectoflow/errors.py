"""Exceptions shared across pipeline modules."""


class ConfigError(ValueError):
    """A configuration value is invalid or infeasible."""


class StateError(RuntimeError):
    """An on-disk run directory is missing or incomplete."""
