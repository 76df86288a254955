"""Exception hierarchy. Every error carries a short machine-readable ``kind``."""


class AdvsegError(Exception):
    kind = "error"


class VolumeFormatError(AdvsegError):
    kind = "format"


class InvalidVolumeError(AdvsegError):
    kind = "invalid-volume"


class ShapeMismatchError(AdvsegError):
    kind = "shape"


class ConfigError(AdvsegError):
    kind = "config"


class PlacementError(AdvsegError):
    kind = "placement"


class EmptyMaskError(AdvsegError):
    kind = "empty-mask"


class NonFiniteLossError(AdvsegError):
    kind = "non-finite"


class CheckpointError(AdvsegError):
    kind = "checkpoint"
