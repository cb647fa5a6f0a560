"""TabNet: sequential attentive feature selection with sparsemax masks.

Step ``s`` turns the previous step's attention features into a mask
``M_s = sparsemax(bn(fc(att)) * P_{s-1})`` over the input features, then
shrinks the prior: ``P_s = P_{s-1} * (gamma - M_s)``. A feature transformer
of GLU blocks processes ``M_s * x`` into a decision part (accumulated through
relu into the output) and the attention part for the next step.
"""

from __future__ import annotations

import numpy as np

from tabular.autodiff import BatchNorm, DTensor, Linear, Module, glu, log, relu, sparsemax, tsum
from tabular.models.base import BaseModel, ModelOutput, input_block

RESIDUAL_SCALE = np.sqrt(0.5)


def prior_update(prior, mask, gamma: float):
    """Next prior scale; works on DTensors and plain arrays alike."""
    return prior * (gamma - mask)


def mask_entropy(mask, eps: float) -> DTensor:
    """Mean over rows of ``sum_j -M_j log(M_j + eps)``."""
    mask = mask if isinstance(mask, DTensor) else DTensor(mask)
    per_row = tsum(-mask * log(mask + eps), axis=1)
    return per_row.mean()


class GLUBlock(Module):
    def __init__(self, fc: Linear, width: int):
        super().__init__()
        self.fc = fc  # may be shared between steps; registered by the owner
        self.norm = self.add_module("norm", BatchNorm(2 * width))

    def __call__(self, x: DTensor, training: bool) -> DTensor:
        return glu(self.norm(self.fc(x), training))


class FeatureTransformer(Module):
    """Shared GLU blocks followed by step-specific ones, residual after the first."""

    def __init__(self, shared: list[Linear], n_in: int, width: int, n_own: int, rng: np.random.Generator):
        super().__init__()
        self.blocks: list[GLUBlock] = []
        for i, fc in enumerate(shared):
            self.blocks.append(self.add_module(f"shared{i}", GLUBlock(fc, width)))
        for i in range(n_own):
            fc_in = n_in if not self.blocks else width
            fc = Linear(fc_in, 2 * width, rng, bias=False)
            block = GLUBlock(fc, width)
            block.add_module("fc", fc)
            self.blocks.append(self.add_module(f"step{i}", block))

    def __call__(self, x: DTensor, training: bool) -> DTensor:
        h = self.blocks[0](x, training)
        for block in self.blocks[1:]:
            h = (h + block(h, training)) * RESIDUAL_SCALE
        return h


class TabNetModel(BaseModel):
    def build(self, rng: np.random.Generator) -> None:
        cfg, dims = self.config, self.dims
        self.embeddings = self._build_embeddings(rng)
        n_feat = dims.n_continuous + sum(e.table.shape[1] for e in self.embeddings)
        if n_feat == 0:
            raise ValueError("model has no input features")
        self.n_features = n_feat
        width = cfg.n_d + cfg.n_a
        self.input_norm = self.add_module("input_norm", BatchNorm(n_feat))
        shared = []
        for i in range(cfg.n_shared_glu):
            fc = Linear(n_feat if i == 0 else width, 2 * width, rng, bias=False)
            shared.append(self.add_module(f"shared_fc{i}", fc))
        self.transformers = [
            self.add_module(f"transformer{s}", FeatureTransformer(shared, n_feat, width, cfg.n_step_glu, rng))
            for s in range(cfg.n_steps + 1)
        ]
        self.attention_fc = []
        self.attention_norm = []
        for s in range(cfg.n_steps):
            self.attention_fc.append(self.add_module(f"attention_fc{s}", Linear(cfg.n_a, n_feat, rng, bias=False)))
            self.attention_norm.append(self.add_module(f"attention_norm{s}", BatchNorm(n_feat)))
        self.head = self.add_module("head", Linear(cfg.n_d, dims.n_outputs, rng))

    def forward(self, batch, training=False, rng=None) -> ModelOutput:
        cfg = self.config
        parts = self._embed(self.embeddings, batch)
        if batch.continuous.shape[1]:
            parts.append(DTensor(batch.continuous))
        x = self.input_norm(input_block(parts), training)
        m = x.shape[0]

        prior = DTensor(np.ones((m, self.n_features)))
        attention = self.transformers[0](x, training)[:, cfg.n_d :]
        decision = None
        masks, priors = [], [prior.data]
        entropy = None
        for s in range(cfg.n_steps):
            a = self.attention_norm[s](self.attention_fc[s](attention), training)
            mask = sparsemax(a * prior)
            prior = prior_update(prior, mask, cfg.gamma)
            h = self.transformers[s + 1](mask * x, training)
            d = relu(h[:, : cfg.n_d])
            decision = d if decision is None else decision + d
            attention = h[:, cfg.n_d :]
            step_entropy = mask_entropy(mask, cfg.mask_epsilon)
            entropy = step_entropy if entropy is None else entropy + step_entropy
            masks.append(mask.data)
            priors.append(prior.data)
        aux = entropy * (cfg.lambda_sparse / cfg.n_steps)
        return ModelOutput(
            self.head(decision),
            auxiliary_loss=aux,
            diagnostics={"masks": masks, "priors": priors},
        )
