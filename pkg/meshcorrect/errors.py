from __future__ import annotations


class MeshCorrectError(Exception):
    """Base class for every error raised by the toolkit."""


class ShapeError(MeshCorrectError, ValueError):
    """Raised when image or tensor shapes do not line up."""


class ConfigError(MeshCorrectError, ValueError):
    """Raised for unknown config keys or out-of-range values."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class MeshFormatError(MeshCorrectError, ValueError):
    """Raised when an OBJ file uses records outside the supported subset."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(location + message)
        self.path = path
        self.line = line


class DataError(MeshCorrectError, RuntimeError):
    """Raised when dataset files or manifests are missing or inconsistent."""


class EmptyEvaluationError(DataError):
    """Raised when a metric is requested over an empty pixel set."""


class CheckpointError(DataError):
    """Raised when a checkpoint header does not match the network it is loaded into."""


class CacheMismatchError(MeshCorrectError, RuntimeError):
    """Raised when backward() receives a cache from a different forward pass."""


class NumericalAbortError(MeshCorrectError, FloatingPointError):
    """Raised when a loss term becomes non-finite during training."""

    def __init__(self, term: str, value: float, step: int | None = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss term '{term}' ({value!r}){where}")
        self.term = term
        self.value = value
        self.step = step
