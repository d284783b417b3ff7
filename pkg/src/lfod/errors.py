"""Exception taxonomy shared across the library and the CLI.

The CLI maps these onto its exit codes: ConfigError -> 2, data and format
problems -> 3, numeric divergence -> 4, checkpoint/layout mismatch -> 5.
"""


class LfodError(Exception):
    """Base class for all library errors."""


class ConfigError(LfodError):
    """Invalid or inconsistent configuration values."""


class ValidationError(LfodError):
    """Input data violates a contract (non-finite values, bad shapes)."""

    def __init__(self, message: str, sample_id: str | None = None):
        if sample_id is not None:
            message = f"{message} (sample_id={sample_id!r})"
        super().__init__(message)
        self.sample_id = sample_id


class StructuralError(LfodError):
    """Shapes or layouts disagree between two artifacts."""


class FormatError(LfodError):
    """A serialized artifact is malformed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDivergedError(LfodError):
    """Non-finite loss or activations during training."""

    def __init__(self, message: str, epoch: int | None = None,
                 step: int | None = None, loss: float | None = None):
        detail = ", ".join(
            f"{k}={v}" for k, v in (("epoch", epoch), ("step", step), ("loss", loss))
            if v is not None
        )
        if detail:
            message = f"{message} [{detail}]"
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.loss = loss


class CheckpointMismatchError(LfodError):
    """Checkpoint is incompatible with the data or a sibling checkpoint."""
