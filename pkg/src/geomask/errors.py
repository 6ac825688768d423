"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite.

    Attributes:
        step: optimisation step at which the non-finite loss was observed.
    """

    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step}: loss={loss}")
        self.step = step
        self.loss = loss


class DatasetError(IOError):
    pass


class CorruptDatasetError(DatasetError):
    pass


class IncompleteDatasetError(DatasetError):
    pass


class DatasetVersionError(DatasetError):
    pass


class BudgetOverflowError(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid run configuration; ``key_path`` points at the offending entry."""

    def __init__(self, key_path: str, message: str):
        super().__init__(f"{key_path}: {message}")
        self.key_path = key_path


class MissingInputError(FileNotFoundError):
    pass
