"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration errors exit 2,
missing-dependency errors exit 3, diverged training exits 4.
"""


class ConfigurationError(ValueError):
    """Invalid user-supplied configuration (unknown name, bad range, ...)."""


class ContractError(ValueError):
    """A call violated an operation's precondition (shape mismatch, ...)."""


class DependencyError(RuntimeError):
    """A pipeline stage needs an artifact that does not exist yet."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
