"""Exception types shared across the package.

Everything derives from MaedetError so callers (and the CLI) can catch the
whole family at once. Plain ValueError is still used for garden-variety bad
arguments (non-finite pixels, degenerate ratios).
"""


class MaedetError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(MaedetError):
    """Array shapes or sizes disagree with what an operation requires."""


class MaskError(MaedetError):
    """Mask index set is empty, covers every patch, or is out of range."""


class ContextError(MaedetError):
    """Too few visible patches to compute context statistics."""


class FormatError(MaedetError):
    """A weight archive or checkpoint file is malformed."""


class ArchMismatchError(MaedetError):
    """Stored parameter shapes or tags disagree with the requested architecture."""


class StrategyError(MaedetError):
    """Unknown feature fusion strategy."""


class ShapeError(MaedetError):
    """Projector or classifier parameters do not match the expected widths."""


class EmptyError(MaedetError):
    """An operation received an empty score set or corpus."""


class DataError(MaedetError):
    """A labeled dataset is empty or contains only one class."""


class NonFiniteError(MaedetError):
    """A NaN or infinite value appeared where finite numbers are required."""


class IngestError(MaedetError):
    """A corpus directory tree is unusable (missing or empty class directories)."""


class ConfigError(MaedetError):
    """A run configuration file is missing, malformed, or inconsistent."""


class CacheCorruptionError(MaedetError):
    """A feature cache entry failed its integrity check."""
