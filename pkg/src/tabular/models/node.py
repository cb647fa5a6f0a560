"""Neural oblivious decision ensembles.

Each tree level picks a soft feature mixture (1.5-entmax over features)
and compares it to a learned threshold through the entmoid gate. The
``2**depth`` leaf weights are products of the per-level gate values, one
factor per level, so they always sum to one.
"""

from __future__ import annotations

import numpy as np

from tabular.autodiff import DTensor, Module, concat, entmax15, entmoid15, exp, matmul, mean, reshape, transpose
from tabular.errors import InvalidValue
from tabular.models.base import BaseModel, ModelOutput, input_block


def leaf_bit_masks(depth: int) -> np.ndarray:
    """``[depth, 2**depth]`` array; entry (j, l) is bit j of leaf index l."""
    leaves = np.arange(2**depth)
    return np.stack([(leaves >> j) & 1 for j in range(depth)]).astype(np.float64)


class ObliviousTreeLayer(Module):
    def __init__(self, n_features: int, num_trees: int, depth: int, tree_output_dim: int, rng: np.random.Generator):
        super().__init__()
        self.n_features = n_features
        self.num_trees = num_trees
        self.depth = depth
        self.tree_output_dim = tree_output_dim
        self.feature_logits = self.add_param(
            "feature_logits", rng.uniform(-0.1, 0.1, size=(n_features, num_trees, depth))
        )
        self.thresholds = self.add_param("thresholds", np.zeros((num_trees, depth)))
        self.log_temperatures = self.add_param("log_temperatures", np.zeros((num_trees, depth)))
        self.responses = self.add_param(
            "responses", rng.normal(0.0, 1.0, size=(num_trees, 2**depth, tree_output_dim))
        )
        self.initialized = self.add_buffer("initialized", np.zeros(1))  # 1.0 once data-aware init has run
        self._bits = leaf_bit_masks(depth)
        self._init_rng = rng

    @property
    def data_aware_initialized(self) -> bool:
        return bool(self.initialized[0])

    def selection_weights(self) -> DTensor:
        """``[n_features, trees * depth]``; each column lies on the simplex."""
        logits = reshape(self.feature_logits, (self.n_features, self.num_trees * self.depth))
        return transpose(entmax15(transpose(logits)))

    def feature_values(self, x: DTensor) -> DTensor:
        fv = matmul(x, self.selection_weights())
        return reshape(fv, (x.shape[0], self.num_trees, self.depth))

    def _data_aware_init(self, fv: np.ndarray) -> None:
        m = fv.shape[0]
        rows = self._init_rng.integers(0, m, size=(self.num_trees, self.depth))
        t_idx, d_idx = np.meshgrid(np.arange(self.num_trees), np.arange(self.depth), indexing="ij")
        b = fv[rows, t_idx, d_idx]
        spread = np.abs(fv - b[None]).std(axis=0)
        tau = np.where(spread > 1e-12, spread, 1.0)
        self.thresholds.data[...] = b
        self.log_temperatures.data[...] = np.log(tau)
        self.initialized[...] = 1.0

    def leaf_weights(self, x: DTensor, training: bool = False) -> DTensor:
        """``[m, trees, 2**depth]`` soft routing weights."""
        fv = self.feature_values(x)
        if training and not self.initialized[0]:
            self._data_aware_init(fv.data)
            fv = self.feature_values(x)
        gates = entmoid15((fv - self.thresholds) / exp(self.log_temperatures))
        m = x.shape[0]
        weights = None
        for j in range(self.depth):
            c = reshape(gates[:, :, j], (m, self.num_trees, 1))
            bit = self._bits[j]
            factor = c * bit + (1.0 - c) * (1.0 - bit)
            weights = factor if weights is None else weights * factor
        return weights

    def __call__(self, x: DTensor, training: bool = False) -> DTensor:
        """``[m, trees, tree_output_dim]`` weighted leaf responses."""
        w = transpose(self.leaf_weights(x, training), (1, 0, 2))  # [T, m, L]
        out = matmul(w, self.responses)  # [T, m, out]
        return transpose(out, (1, 0, 2))


class NODEModel(BaseModel):
    """Dense stack of oblivious-tree layers.

    Layer ``l`` sees the original features plus the flattened outputs of all
    earlier layers. The prediction is the mean, over every tree of every
    layer, of the first ``n_outputs`` response components.
    """

    def build(self, rng: np.random.Generator) -> None:
        cfg, dims = self.config, self.dims
        if cfg.tree_output_dim < dims.n_outputs:
            raise InvalidValue(
                "model.tree_output_dim", f"must be >= number of outputs ({dims.n_outputs})"
            )
        self.leave_one_out = cfg.categorical_mode == "leave_one_out"
        if self.leave_one_out:
            self.embeddings = []
            n_in = dims.n_continuous + dims.n_categorical
        else:
            self.embeddings = self._build_embeddings(rng)
            n_in = dims.n_continuous + sum(e.table.shape[1] for e in self.embeddings)
        if n_in == 0:
            raise ValueError("model has no input features")
        self.trees: list[ObliviousTreeLayer] = []
        width = n_in
        for i in range(cfg.num_layers):
            layer = ObliviousTreeLayer(width, cfg.num_trees, cfg.depth, cfg.tree_output_dim, rng)
            self.trees.append(self.add_module(f"layer{i}", layer))
            width += cfg.num_trees * cfg.tree_output_dim

    def features(self, batch) -> DTensor:
        parts = []
        if batch.continuous.shape[1]:
            parts.append(DTensor(batch.continuous))
        if self.leave_one_out:
            if self.dims.n_categorical:
                parts.append(DTensor(batch.loo))
        else:
            parts.extend(self._embed(self.embeddings, batch))
        return input_block(parts)

    def forward(self, batch, training=False, rng=None) -> ModelOutput:
        x = self.features(batch)
        m = x.shape[0]
        outputs = []
        h = x
        for layer in self.trees:
            out = layer(h, training)
            outputs.append(out)
            h = concat([h, reshape(out, (m, layer.num_trees * layer.tree_output_dim))], axis=1)
        c = self.dims.n_outputs
        heads = concat([out[:, :, :c] for out in outputs], axis=1)
        return ModelOutput(mean(heads, axis=1))
