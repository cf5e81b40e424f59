"""Errors and small shared types for exnorm."""

from enum import IntEnum
from typing import Sequence


class ExitCode(IntEnum):
    """Process exit codes of the command-line interface."""

    OK = 0
    USAGE = 2
    NUMERIC = 3


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""

    pass


class NonFiniteError(ArithmeticError):
    """A NaN or infinite value appeared where finite values are required."""

    pass


class BackwardError(RuntimeError):
    """Reverse-mode differentiation was requested on an unusable graph."""

    pass


class DetachedParameterError(BackwardError):
    """Some parameters are not reachable from the loss."""

    def __init__(self, names: Sequence[str]) -> None:
        self.names = list(names)
        super().__init__(
            "Parameters not reachable from the loss: " + ", ".join(self.names)
        )


class GradientCheckError(ValueError):
    """A gradient check was requested under unusable conditions."""

    pass


class NormalizerConfigError(ValueError):
    """A normalizer, pool, or statistics bundle is misconfigured."""

    pass


class ENConfigError(ValueError):
    """An exemplar normalization configuration is invalid."""

    pass


class NormTypeNotFoundError(Exception):
    """The type of normalization layer requested does not exist."""

    pass


class RatioError(ValueError):
    """Ratios are not on the probability simplex."""

    pass


class ArchitectureError(ValueError):
    """An architecture description is inconsistent."""

    pass


class DatasetFormatError(ValueError):
    """A dataset file does not follow the expected layout."""

    pass


class EmptyDatasetError(ValueError):
    """An operation needs at least one sample and got none."""

    pass


class TrainingDivergedError(ArithmeticError):
    """The loss became non-finite during training."""

    def __init__(self, step: int, loss: float) -> None:
        self.step = step
        self.loss = loss
        super().__init__(f"Non-finite loss {loss} at step {step}")


class NoExemplarLayersError(Exception):
    """The model has no exemplar normalization layers to record."""

    pass


class ExportError(OSError):
    """Writing an export file failed."""

    pass


class CheckpointError(ValueError):
    """A checkpoint container is malformed or incompatible."""

    pass


class ConfigFileError(ValueError):
    """A key=value configuration file could not be parsed."""

    pass
