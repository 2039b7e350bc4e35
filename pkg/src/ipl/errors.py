"""Exception types raised across the package."""


class IPLError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(IPLError, ValueError):
    pass


class ContractError(IPLError):
    """An operation was called outside its precondition."""


class DegenerateObjectiveError(IPLError, ValueError):
    pass


class DegenerateInstanceError(IPLError, ValueError):
    """An instance has no valid tokens to average over."""


class VocabularyError(IPLError, ValueError):
    pass


class SequenceLengthError(IPLError, ValueError):
    pass


class BoundsError(IPLError, IndexError):
    pass


class ConfigError(IPLError, ValueError):
    pass


class TrainingDivergenceError(IPLError):
    def __init__(self, step, loss):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step
        self.loss = loss


class CheckpointError(IPLError):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    """Stored tensors disagree with the embedded config."""
