"""Exception types shared across the pipeline."""


class NeuroClipsError(Exception):
    """Base class for all package errors."""


class InvalidArgument(NeuroClipsError, ValueError):
    pass


class ContractViolation(NeuroClipsError, RuntimeError):
    """An internal precondition between components was broken."""


class CorruptFile(NeuroClipsError, IOError):
    pass


class NotReady(NeuroClipsError, RuntimeError):
    """A required upstream artifact (checkpoint, dataset, stage) is missing."""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        msg = f"stage '{stage}' is not ready"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class SingularSystem(NeuroClipsError, ArithmeticError):
    pass


class Divergence(NeuroClipsError, RuntimeError):
    """Training produced a non-finite loss."""


class ConfigError(NeuroClipsError, ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")
