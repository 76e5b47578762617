"""Shared error taxonomy: configuration, data, and checkpoint failures."""


class ConfigError(ValueError):
    """A run configuration violates a contract (caught before training)."""


class DataError(ValueError):
    """A dataset record is malformed or out of range."""


class CheckpointError(ValueError):
    """A checkpoint file is truncated, versioned wrong, or mismatched."""
