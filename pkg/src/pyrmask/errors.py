"""Shared exception types."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class DataError(ValueError):
    """Input data violates a documented contract (e.g. out-of-range label)."""


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""
