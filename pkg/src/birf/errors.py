"""Exception types shared across the package."""


class BirfError(Exception):
    """Base class for all package errors."""


class ConfigError(BirfError, ValueError):
    """Invalid configuration or mismatched dimensions."""


class DatasetError(BirfError):
    """A dataset directory or file could not be loaded."""


class SnapshotError(BirfError):
    """Base class for snapshot format errors."""


class BadMagicError(SnapshotError):
    pass


class VersionMismatchError(SnapshotError):
    def __init__(self, found: int, expected: int):
        super().__init__(f"snapshot format version {found} is not supported (expected {expected})")
        self.found = found
        self.expected = expected


class ChecksumError(SnapshotError):
    pass


class TruncatedSnapshotError(SnapshotError):
    pass


class SerializationError(SnapshotError):
    """Model state cannot be encoded (inconsistent shapes)."""


class TrainingDivergedError(BirfError, FloatingPointError):
    pass
