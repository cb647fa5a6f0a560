"""Exception hierarchy shared by every part of the toolkit."""

from __future__ import annotations


class TabularError(Exception):
    """Base class for all errors raised by ``tabular``."""


# -- configuration ---------------------------------------------------------


class ConfigError(TabularError, ValueError):
    pass


class MalformedYaml(ConfigError):
    def __init__(self, line: int | None, message: str):
        self.line = line
        self.message = message
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"malformed YAML ({where}{message})")


class UnknownTopLevelKey(ConfigError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown top-level config section {name!r}")


class DisjointnessViolation(ConfigError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"column {column!r} appears in more than one of target/continuous/categorical")


class InvalidValue(ConfigError):
    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        super().__init__(f"invalid value for {field}: {reason}")


class IncompatibleLossTask(ConfigError):
    def __init__(self, loss: str, task: str):
        self.loss = loss
        self.task = task
        super().__init__(f"loss {loss!r} cannot be used for task {task!r}")


class UnknownModelType(ConfigError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown model type {name!r}")


# -- data ------------------------------------------------------------------


class DataError(TabularError):
    pass


class RaggedRow(DataError):
    def __init__(self, line: int, expected: int, got: int):
        self.line = line
        super().__init__(f"line {line}: expected {expected} fields, got {got}")


class EmptyFile(DataError):
    pass


class TooFewRows(DataError):
    pass


class MissingColumn(DataError, KeyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(name)

    def __str__(self) -> str:
        return f"missing column {self.name!r}"


class NullTarget(DataError):
    def __init__(self, row: int):
        self.row = row
        super().__init__(f"target is null at row {row}")


class UnseenTargetLabel(DataError):
    def __init__(self, label: str):
        self.label = label
        super().__init__(f"target label {label!r} was not present in the training data")


class NonNumericContinuous(DataError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"continuous column {column!r} contains non-numeric values")


class NotFitted(TabularError):
    pass


class AlreadyFitted(TabularError):
    pass


# -- numerics --------------------------------------------------------------


class ShapeMismatch(TabularError, ValueError):
    pass


class IndexOutOfRange(TabularError, IndexError):
    def __init__(self, position: int, index: int, size: int):
        self.position = position
        self.index = index
        self.size = size
        super().__init__(f"index {index} at position {position} is out of range for size {size}")


class DegenerateBatch(TabularError):
    pass


class BisectionNonConvergence(TabularError, ArithmeticError):
    pass


class NonScalarLoss(TabularError):
    pass


class DimensionNotDivisible(TabularError, ValueError):
    def __init__(self, dim: int, heads: int):
        self.dim = dim
        self.heads = heads
        super().__init__(f"embedding dim {dim} is not divisible by {heads} heads")


class MetricTaskMismatch(TabularError, ValueError):
    def __init__(self, metric: str, task: str):
        self.metric = metric
        self.task = task
        super().__init__(f"metric {metric!r} is not defined for task {task!r}")


# -- training / persistence ------------------------------------------------


class GradMissing(TabularError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"parameter {name!r} has no gradient")


class NonFiniteLoss(TabularError, FloatingPointError):
    def __init__(self, batch_index: int, value: float, epoch: int | None = None):
        self.batch_index = batch_index
        self.value = value
        self.epoch = epoch
        where = f"epoch {epoch}, " if epoch is not None else ""
        super().__init__(f"non-finite loss {value!r} at {where}batch {batch_index}")


class NoCheckpoint(TabularError):
    pass


class IoError(TabularError, OSError):
    def __init__(self, path, reason: str = ""):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"I/O error at {self.path}: {reason}" if reason else f"I/O error at {self.path}")


class BadCheckpoint(TabularError):
    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(f"bad checkpoint: {reason}")


class VersionMismatch(TabularError):
    def __init__(self, found, expected):
        self.found = found
        self.expected = expected
        super().__init__(f"checkpoint format_version {found!r} is not supported (expected {expected})")
