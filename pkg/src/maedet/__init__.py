"""maedet: AI-image detection by scoring contextual reconstruction anomalies.

A frozen masked-autoencoder backbone reconstructs hidden patches from their
visible surroundings; patches that the context predicts *too* well (or too
poorly) relative to the image's own statistics are flagged by a per-patch
anomaly score. Scores from several random maskings are pooled into summary
statistics and fused with a global semantic feature by a small trainable
classifier head.
"""

from .errors import (
    ArchMismatchError,
    CacheCorruptionError,
    ConfigError,
    ContextError,
    DataError,
    DimensionError,
    EmptyError,
    FormatError,
    IngestError,
    MaedetError,
    MaskError,
    NonFiniteError,
    ShapeError,
    StrategyError,
)

__version__ = "0.1.0"

__all__ = [
    "ArchMismatchError",
    "CacheCorruptionError",
    "ConfigError",
    "ContextError",
    "DataError",
    "DimensionError",
    "EmptyError",
    "FormatError",
    "IngestError",
    "MaedetError",
    "MaskError",
    "NonFiniteError",
    "ShapeError",
    "StrategyError",
    "__version__",
]
