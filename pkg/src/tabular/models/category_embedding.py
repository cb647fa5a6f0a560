"""Feed-forward network over learned categorical embeddings and continuous inputs."""

from __future__ import annotations

import numpy as np

from tabular.autodiff import BatchNorm, DTensor, Linear, dropout, relu
from tabular.models.base import BaseModel, ModelOutput, input_block


class CategoryEmbeddingModel(BaseModel):
    def build(self, rng: np.random.Generator) -> None:
        cfg, dims = self.config, self.dims
        self.embeddings = self._build_embeddings(rng, cfg.embedding_dims)
        width = sum(e.table.shape[1] for e in self.embeddings) + dims.n_continuous
        if width == 0:
            raise ValueError("model has no input features")
        self.cont_norm = self.add_module("cont_norm", BatchNorm(dims.n_continuous)) if dims.n_continuous else None
        self.layers: list[Linear] = []
        self.norms: list[BatchNorm | None] = []
        for i, size in enumerate(cfg.layer_sizes):
            self.layers.append(self.add_module(f"linear{i}", Linear(width, size, rng)))
            self.norms.append(self.add_module(f"norm{i}", BatchNorm(size)) if cfg.use_batch_norm else None)
            width = size
        self.head = self.add_module("head", Linear(width, dims.n_outputs, rng))

    def forward(self, batch, training=False, rng=None) -> ModelOutput:
        parts = self._embed(self.embeddings, batch)
        if self.cont_norm is not None:
            parts.append(self.cont_norm(DTensor(batch.continuous), training))
        h = input_block(parts)
        for layer, norm in zip(self.layers, self.norms):
            h = relu(layer(h))
            if norm is not None:
                h = norm(h, training)
            h = dropout(h, self.config.dropout, training, rng)
        return ModelOutput(self.head(h))
