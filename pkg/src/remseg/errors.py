"""Exception types raised across the package."""


class RemsegError(Exception):
    """Base class for all package errors."""


class ParameterError(RemsegError, ValueError):
    """An argument is outside its allowed range."""


class ShapeError(RemsegError, ValueError):
    """Tensor or array shapes do not line up."""


class DomainError(RemsegError, ValueError):
    """Values are outside the domain an operation accepts (non-binary, non-finite...)."""


class IngestionError(RemsegError):
    """A dataset manifest references something that cannot be loaded."""


class ManifestParseError(IngestionError):
    def __init__(self, path, offset: int, msg: str):
        super().__init__(f"{path}: malformed JSON at byte {offset}: {msg}")
        self.path = path
        self.offset = offset


class AlignmentError(IngestionError):
    """Frames and masks of a sample disagree in count or size."""


class FrozenModuleError(RemsegError, RuntimeError):
    """Attempt to modify a frozen module."""


class TrainingDivergedError(RemsegError, RuntimeError):
    def __init__(self, step: int, lr: float, batch_ids, loss: float):
        super().__init__(
            f"non-finite loss {loss} at step {step} (lr={lr}, batch={list(batch_ids)})"
        )
        self.step = step
        self.lr = lr
        self.batch_ids = list(batch_ids)
        self.loss = loss


class ChecksumError(RemsegError):
    """A checkpoint blob does not match the checksum recorded in its sidecar."""
