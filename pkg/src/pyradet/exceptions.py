"""Exception hierarchy shared across the package."""


class PyradetError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(PyradetError, ValueError):
    """Tensor extents do not satisfy an operation's requirements."""


class ConfigError(PyradetError, ValueError):
    """A configuration violates one of its stated constraints."""


class ContractError(PyradetError, ValueError):
    """Two pipeline stages disagree about a shared ordering or layout."""


class DatasetError(PyradetError, ValueError):
    """A dataset file is missing, malformed, or contains invalid boxes."""


class CheckpointError(PyradetError, ValueError):
    """A checkpoint file is unreadable or incompatible with the model."""


class EvaluationError(PyradetError, ValueError):
    """An evaluation request is ill-posed (e.g. no ground truth at all)."""


class TrainingDiverged(PyradetError, RuntimeError):
    """Training produced a non-finite loss.

    Carries enough context to replay the offending batch.
    """

    def __init__(self, iteration: int, batch_seeds, message: str = ""):
        self.iteration = iteration
        self.batch_seeds = list(batch_seeds)
        detail = message or (
            f"non-finite loss at iteration {iteration}; "
            f"batch sample seeds: {self.batch_seeds}"
        )
        super().__init__(detail)
