"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class StateError(RuntimeError):
    """An object was used in a way its lifecycle forbids (e.g. a consumed tape)."""


class TrainingError(RuntimeError):
    """A training loop produced a non-finite loss or otherwise diverged."""


class EvaluationError(RuntimeError):
    """A loss callback returned a non-finite value during gradient checking."""


class ParseError(ValueError):
    """A data file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class FormatError(ValueError):
    """A checkpoint file is malformed; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(FormatError):
    """Checkpoint format version is not supported by this build."""


class StageOrderError(RuntimeError):
    """A pipeline stage was invoked before its prerequisite stage."""


class MissingInputError(FileNotFoundError):
    """A consumer stage did not find the files it expects; lists them."""

    def __init__(self, directory: str, missing: list[str]):
        super().__init__(f"missing inputs in {directory}: {', '.join(missing)}")
        self.missing = list(missing)
