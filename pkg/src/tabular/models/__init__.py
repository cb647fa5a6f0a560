"""Network architectures behind the common :class:`BaseModel` contract."""

from __future__ import annotations

import numpy as np

from tabular.config import ModelConfig, ModelKind, resolve_model
from tabular.models.autoint import AutoIntModel
from tabular.models.base import (
    BaseModel,
    DataDims,
    ModelOutput,
    compute_loss,
    compute_metrics,
    default_embedding_dim,
    predicted_classes,
)
from tabular.models.category_embedding import CategoryEmbeddingModel
from tabular.models.node import NODEModel, ObliviousTreeLayer
from tabular.models.tabnet import TabNetModel

MODEL_CLASSES: dict[ModelKind, type[BaseModel]] = {
    ModelKind.CATEGORY_EMBEDDING: CategoryEmbeddingModel,
    ModelKind.NODE_LEAVE_ONE_OUT: NODEModel,
    ModelKind.NODE_EMBEDDING: NODEModel,
    ModelKind.TABNET: TabNetModel,
    ModelKind.AUTOINT: AutoIntModel,
}


def build_model(config: ModelConfig, dims: DataDims, rng: np.random.Generator) -> BaseModel:
    return MODEL_CLASSES[resolve_model(config)](config, dims, rng)


__all__ = [
    "AutoIntModel", "BaseModel", "CategoryEmbeddingModel", "DataDims", "ModelOutput",
    "NODEModel", "ObliviousTreeLayer", "TabNetModel", "MODEL_CLASSES", "build_model",
    "compute_loss", "compute_metrics", "default_embedding_dim", "predicted_classes",
]
