"""Shared error types, mapped to CLI exit codes in cli.py."""


class ConfigError(ValueError):
    """Bad run configuration (schema violation, missing field, bad value)."""


class DataError(ValueError):
    """Bad or missing data (file format, ground truth absent, shape)."""
