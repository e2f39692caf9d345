"""Error types carrying the stable codes used in files, the CLI and the wire protocol."""


class SubmodelError(Exception):
    code = "ERROR"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class DimensionMismatch(SubmodelError, ValueError):
    code = "DIM_MISMATCH"


class UnknownSpeaker(SubmodelError, KeyError):
    code = "UNKNOWN_SPEAKER"

    def __str__(self) -> str:
        return self.args[0]


class FormatError(SubmodelError):
    """Raised by the binary readers; ``code`` is BAD_MAGIC, BAD_VERSION or TRUNCATED."""

    code = "BAD_FORMAT"


class StoreError(SubmodelError):
    code = "STORE_ERROR"


class TrainingDiverged(SubmodelError, FloatingPointError):
    code = "DIVERGED"

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
