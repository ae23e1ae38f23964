"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(RuntimeError):
    """A documented precondition of a call was violated."""


class ConfigError(ValueError):
    """A configuration (dataset, episode shape, training run) is infeasible or malformed."""


class CheckpointVersionError(IOError):
    """Checkpoint magic or format version does not match this build."""


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN/Inf loss; carries the offending episode seed."""

    def __init__(self, message: str, episode: int, episode_seed: int):
        super().__init__(message)
        self.episode = episode
        self.episode_seed = episode_seed
