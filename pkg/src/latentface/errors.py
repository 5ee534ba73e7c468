"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class LatentFaceError(Exception):
    exit_code = 2


class UsageError(LatentFaceError):
    exit_code = 1


class InvalidInputError(LatentFaceError, ValueError):
    exit_code = 2


class DegeneratePoseError(InvalidInputError):
    pass


class DataError(LatentFaceError):
    exit_code = 2


class CheckpointError(DataError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class NumericalAbort(LatentFaceError):
    """Raised when a loss term goes non-finite during training."""

    exit_code = 3

    def __init__(self, step, term, value=float("nan")):
        self.step = step
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss at step {step} in term {term!r} ({value})")
