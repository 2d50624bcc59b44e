"""Exception types raised across the package."""


class EvmlpError(Exception):
    """Base class for every error this package raises deliberately."""


class ShapeError(EvmlpError, ValueError):
    pass


class ConfigError(EvmlpError, ValueError):
    pass


class WeightFormatError(EvmlpError, ValueError):
    pass


class FrameError(EvmlpError, ValueError):
    pass


class CacheError(EvmlpError, RuntimeError):
    pass
