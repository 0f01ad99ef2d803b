"""Exception types shared across the package."""


class FreezeCacheError(Exception):
    """Base class for package-specific failures."""


class FormatError(FreezeCacheError):
    """A serialized artifact is malformed; the message names the file."""


class ConfigurationError(FreezeCacheError):
    """A pipeline stage is missing a required input or setting."""


class TrainingDivergedError(FreezeCacheError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch}: loss={loss!r}")
