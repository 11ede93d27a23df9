"""Exception hierarchy shared across the package."""


class MopError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MopError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(MopError, ValueError):
    """A configuration value is invalid."""


class DataError(MopError, ValueError):
    """A dataset, corpus or calibration set cannot satisfy a request."""


class ContractError(MopError, RuntimeError):
    """A precondition of an operation was violated."""


class InputError(MopError, ValueError):
    """Model inputs (token ids, sequence length) are out of range."""


class EngineError(MopError, RuntimeError):
    """The pruning loop could not continue.

    ``trace`` holds the iterations completed before the failure.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class CheckpointError(MopError):
    """Base class for checkpoint I/O failures."""


class VersionMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    """Manifest is malformed or disagrees with the payload."""
