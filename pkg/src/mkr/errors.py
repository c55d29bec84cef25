"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes cannot be combined."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class UsageError(ValueError):
    """Invalid command-line invocation or configuration."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the epoch/step where it happened."""

    def __init__(self, epoch: int, step: int, message: str = ""):
        self.epoch = epoch
        self.step = step
        detail = f" ({message})" if message else ""
        super().__init__(f"training diverged at epoch {epoch}, step {step}{detail}")
