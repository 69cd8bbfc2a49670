"""Shared exception types."""


class KPNetError(Exception):
    """Base class for all package errors."""


class GeometryError(KPNetError):
    pass


class ConfigError(KPNetError):
    pass


class DataError(KPNetError):
    pass


class LossError(KPNetError):
    pass
