"""Exception hierarchy shared by every module."""


class CacheBlendError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(CacheBlendError, ValueError):
    """A configuration value is out of range or inconsistent."""


class DomainError(CacheBlendError, ValueError):
    """An argument is outside the domain of the operation (shape, length, position)."""


class CapacityError(CacheBlendError):
    """A store tier cannot hold the requested bytes."""


class IntegrityError(CacheBlendError):
    """A stored record is corrupt (bad magic, version, size or checksum)."""


class PipelineError(CacheBlendError, RuntimeError):
    """A layer could not be fetched while the pipeline was running."""

    def __init__(self, message, chunk_hash=None, layer=None):
        super().__init__(message)
        self.chunk_hash = chunk_hash
        self.layer = layer
