"""Patch-local MLP vision network with event-driven incremental inference."""

from evmlp.errors import (
    CacheError,
    ConfigError,
    EvmlpError,
    FrameError,
    ShapeError,
    WeightFormatError,
)

__version__ = "0.1.0"

__all__ = [
    "CacheError",
    "ConfigError",
    "EvmlpError",
    "FrameError",
    "ShapeError",
    "WeightFormatError",
    "__version__",
]
