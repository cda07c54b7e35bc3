"""Exception hierarchy. CLI exit codes are keyed off the top-level classes."""


class M2DError(Exception):
    pass


class ConfigError(M2DError, ValueError):
    pass


class DataError(M2DError):
    pass


class InputTooShortError(DataError, ValueError):
    pass


class InvalidInputError(DataError, ValueError):
    pass


class DimensionError(M2DError, ValueError):
    pass


class TilingError(DimensionError):
    pass


class AlignmentError(DimensionError):
    pass


class DomainError(M2DError, ValueError):
    pass


class ConsistencyError(M2DError, ValueError):
    pass


class EmptyBatchError(M2DError, ValueError):
    pass


class SplitError(M2DError, ValueError):
    pass


class DivergenceError(M2DError, RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite or out-of-range loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class CheckpointError(M2DError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass
