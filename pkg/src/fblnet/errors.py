"""Exceptions raised across fblnet.

Every class carries the error `code` used throughout the docs and subclasses
the closest builtin, so callers may catch either the specific class or the
builtin (e.g. `except ValueError`).
"""


class FBLNetError(Exception):
    code = "E_FBLNET"


class ConfigError(FBLNetError, ValueError):
    code = "E_CONFIG"


class ModeError(ConfigError):
    code = "E_MODE"


class ShapeError(FBLNetError, ValueError):
    code = "E_SHAPE"


class WindowError(ShapeError):
    code = "E_WINDOW"


class NodeError(FBLNetError, KeyError):
    code = "E_NODE"


class EvalModeError(FBLNetError, RuntimeError):
    code = "E_EVAL"


class ZeroMapError(FBLNetError, ValueError):
    code = "E_ZERO_MAP"


class DomainError(FBLNetError, ValueError):
    code = "E_DOMAIN"


class ConstantMapError(FBLNetError, ValueError):
    code = "E_CONST_MAP"


class NotNormalizedError(FBLNetError, ValueError):
    code = "E_NOT_NORMALIZED"


class EmptyFixationError(FBLNetError, ValueError):
    code = "E_EMPTY_FIX"


class MissingPairError(FBLNetError, FileNotFoundError):
    code = "E_MISSING_PAIR"


class EmptyDatasetError(FBLNetError, ValueError):
    code = "E_EMPTY_DATASET"


class NanLossError(FBLNetError, RuntimeError):
    code = "E_NAN_LOSS"


class ArtifactIOError(FBLNetError, OSError):
    code = "E_IO"


class MissingPathError(ArtifactIOError, FileNotFoundError):
    # dataset directories and config files that cannot be located
    pass


class VersionError(FBLNetError, ValueError):
    code = "E_VERSION"


class IntegrityError(VersionError):
    # corrupted or truncated checkpoint blobs
    pass
