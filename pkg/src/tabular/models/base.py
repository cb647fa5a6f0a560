"""The model contract and the generic loss/metric path.

A model subclasses :class:`BaseModel` and implements two things:
``build`` (create parameters) and ``forward`` (batch -> :class:`ModelOutput`).
Loss and metrics are shared; a model with an extra penalty reports it as
``ModelOutput.auxiliary_loss`` or overrides :meth:`BaseModel.compute_loss`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from tabular.autodiff import DTensor, Embedding, Module, concat, cross_entropy_logits, mse
from tabular.config import ModelConfig
from tabular.data import Batch
from tabular.errors import MetricTaskMismatch


@dataclass(frozen=True)
class DataDims:
    """Shape information a network needs from the fitted pipeline."""

    n_continuous: int
    cardinalities: tuple[int, ...]
    n_outputs: int  # classes for classification, 1 for regression
    task: str

    @property
    def n_categorical(self) -> int:
        return len(self.cardinalities)


@dataclass
class ModelOutput:
    logits: DTensor  # [m, C] for classification, [m, 1] for regression
    auxiliary_loss: DTensor | None = None
    diagnostics: dict[str, object] = field(default_factory=dict)


def default_embedding_dim(cardinality: int) -> int:
    return max(1, min(50, math.ceil(cardinality / 2)))


class BaseModel(Module):
    def __init__(self, config: ModelConfig, dims: DataDims, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.dims = dims
        self.build(rng)

    def build(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def forward(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None) -> ModelOutput:
        raise NotImplementedError

    def __call__(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None) -> ModelOutput:
        return self.forward(batch, training=training, rng=rng)

    def compute_loss(self, output: ModelOutput, targets: np.ndarray) -> DTensor:
        return compute_loss(output, targets, self.config)

    # shared helper: one embedding table per categorical column, rows = cardinality + 1
    def _build_embeddings(self, rng: np.random.Generator, dims: tuple[int, ...] | None = None) -> list[Embedding]:
        if dims is None:
            dims = tuple(default_embedding_dim(c) for c in self.dims.cardinalities)
        if len(dims) != self.dims.n_categorical:
            raise ValueError(
                f"{len(dims)} embedding dims given for {self.dims.n_categorical} categorical columns"
            )
        tables = []
        for j, (card, d) in enumerate(zip(self.dims.cardinalities, dims)):
            tables.append(self.add_module(f"embedding{j}", Embedding(card + 1, d, rng)))
        return tables

    @staticmethod
    def _embed(tables: list[Embedding], batch: Batch) -> list[DTensor]:
        return [table(batch.categorical[:, j]) for j, table in enumerate(tables)]


def compute_loss(output: ModelOutput, targets: np.ndarray, config: ModelConfig) -> DTensor:
    """Task loss plus any auxiliary loss the model reported."""
    if config.task == "classification":
        loss = cross_entropy_logits(output.logits, targets)
    else:
        loss = mse(output.logits, DTensor(np.asarray(targets, dtype=np.float64).reshape(output.logits.shape)))
    if output.auxiliary_loss is not None:
        loss = loss + output.auxiliary_loss
    return loss


def predicted_classes(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(logits, axis=1)


def compute_metrics(output: ModelOutput | np.ndarray, targets: np.ndarray, metrics, task: str) -> dict[str, float]:
    logits = output.logits.data if isinstance(output, ModelOutput) else np.asarray(output)
    out = {}
    for name in metrics:
        if name == "accuracy":
            if task != "classification":
                raise MetricTaskMismatch(name, task)
            out[name] = float(np.mean(predicted_classes(logits) == np.asarray(targets)))
        elif name == "mse":
            if task != "regression":
                raise MetricTaskMismatch(name, task)
            diff = logits.reshape(-1) - np.asarray(targets, dtype=np.float64).reshape(-1)
            out[name] = float(np.mean(diff * diff))
        else:
            raise ValueError(f"unknown metric {name!r}")
    return out


def input_block(parts: list[DTensor]) -> DTensor:
    return parts[0] if len(parts) == 1 else concat(parts, axis=1)
