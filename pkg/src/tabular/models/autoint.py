"""AutoInt: multi-head self-attention across per-feature embeddings."""

from __future__ import annotations

import numpy as np

from tabular.autodiff import DTensor, Linear, Module, concat, matmul, relu, reshape, softmax, transpose
from tabular.autodiff.nn import glorot_uniform
from tabular.errors import DimensionNotDivisible
from tabular.models.base import BaseModel, ModelOutput


class InteractingLayer(Module):
    def __init__(self, dim: int, heads: int, use_residual: bool, rng: np.random.Generator):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.query = self.add_param("query", glorot_uniform(rng, dim, dim))
        self.key = self.add_param("key", glorot_uniform(rng, dim, dim))
        self.value = self.add_param("value", glorot_uniform(rng, dim, dim))
        self.residual = self.add_param("residual", glorot_uniform(rng, dim, dim)) if use_residual else None

    def _split(self, t: DTensor) -> DTensor:
        m, f, _ = t.shape
        return transpose(reshape(t, (m, f, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, e: DTensor) -> tuple[DTensor, np.ndarray]:
        m, f, d = e.shape
        q = self._split(matmul(e, self.query))
        k = self._split(matmul(e, self.key))
        v = self._split(matmul(e, self.value))
        # raw inner products, no 1/sqrt(d) scaling
        weights = softmax(matmul(q, transpose(k, (0, 1, 3, 2))))  # [m, H, F, F]
        heads = matmul(weights, v)  # [m, H, F, head_dim]
        out = reshape(transpose(heads, (0, 2, 1, 3)), (m, f, d))
        if self.residual is not None:
            out = out + matmul(e, self.residual)
        return relu(out), weights.data


class AutoIntModel(BaseModel):
    def build(self, rng: np.random.Generator) -> None:
        cfg, dims = self.config, self.dims
        if cfg.embed_dim % cfg.num_heads:
            raise DimensionNotDivisible(cfg.embed_dim, cfg.num_heads)
        d = cfg.embed_dim
        self.embeddings = self._build_embeddings(rng, (d,) * dims.n_categorical)
        self.n_fields = dims.n_categorical + dims.n_continuous
        if self.n_fields == 0:
            raise ValueError("model has no input features")
        self.cont_vectors = (
            self.add_param("cont_vectors", rng.normal(0.0, 0.02, size=(dims.n_continuous, d)))
            if dims.n_continuous
            else None
        )
        self.layers = [
            self.add_module(f"attention{i}", InteractingLayer(d, cfg.num_heads, cfg.use_residual, rng))
            for i in range(cfg.num_attn_layers)
        ]
        self.head = self.add_module("head", Linear(self.n_fields * d, dims.n_outputs, rng))

    def field_embeddings(self, batch) -> DTensor:
        """``[m, fields, embed_dim]``: categorical lookups then value-scaled continuous vectors."""
        m = len(batch)
        d = self.config.embed_dim
        parts = [reshape(t, (m, 1, d)) for t in self._embed(self.embeddings, batch)]
        if self.cont_vectors is not None:
            x = DTensor(batch.continuous[:, :, None])
            parts.append(x * reshape(self.cont_vectors, (1, self.dims.n_continuous, d)))
        return parts[0] if len(parts) == 1 else concat(parts, axis=1)

    def forward(self, batch, training=False, rng=None) -> ModelOutput:
        e = self.field_embeddings(batch)
        maps = []
        for layer in self.layers:
            e, w = layer(e)
            maps.append(w)
        m = e.shape[0]
        flat = reshape(e, (m, self.n_fields * self.config.embed_dim))
        return ModelOutput(self.head(flat), diagnostics={"attention": maps})
