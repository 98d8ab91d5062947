"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments violating its contract."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt, truncated, or of the wrong version."""


class ConfigMismatch(CheckpointError):
    """A checkpoint was loaded against an incompatible expected config."""


class DataError(RuntimeError):
    """Input data (files, directories, datasets) is missing or unusable."""


class TrainingDiverged(RuntimeError):
    """Training aborted because the loss became non-finite."""

    def __init__(self, message, curve=None):
        super().__init__(message)
        self.curve = curve if curve is not None else []
