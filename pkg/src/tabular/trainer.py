"""Optimisation loop, early stopping and best-checkpoint bookkeeping."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from tabular.autodiff import ParamStore, backward
from tabular.checkpoint import load_checkpoint, save_checkpoint
from tabular.config import ConfigBundle, OptimizerConfig
from tabular.data import DROPOUT_STREAM, Batch, EncodedDataset, PipelineState, batches, stream_rng
from tabular.errors import GradMissing, NoCheckpoint, NonFiniteLoss
from tabular.models import BaseModel, compute_metrics
from tabular.tracking import RunHandle, log_gradient_norms

logger = logging.getLogger(__name__)


# -- optimisers ------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float
    base_lr: float
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def create(cls, params: ParamStore, lr: float) -> OptimizerState:
        return cls(
            lr=lr,
            base_lr=lr,
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def _grads(params: ParamStore) -> list[tuple[str, object, np.ndarray]]:
    out = []
    for name, p in params.items():
        if p.grad is None:
            raise GradMissing(name)
        out.append((name, p, p.grad))
    return out


def adam_step(
    params: ParamStore,
    opt: OptimizerState,
    lr: float | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One Adam update with decoupled weight decay; gradients are zeroed afterwards."""
    lr = opt.lr if lr is None else lr
    grads = _grads(params)  # check every parameter before mutating any
    opt.t += 1
    c1 = 1.0 - beta1**opt.t
    c2 = 1.0 - beta2**opt.t
    for name, p, g in grads:
        m, v = opt.m[name], opt.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + lr * weight_decay * p.data
        p.data -= update
    params.zero_grad()


def sgd_step(params: ParamStore, opt: OptimizerState, lr: float | None = None, weight_decay: float = 0.0) -> None:
    """Plain gradient descent with the same decoupled decay convention as :func:`adam_step`."""
    lr = opt.lr if lr is None else lr
    grads = _grads(params)
    opt.t += 1
    for _, p, g in grads:
        update = lr * g
        if weight_decay:
            update = update + lr * weight_decay * p.data
        p.data -= update
    params.zero_grad()


def optimizer_step(params: ParamStore, opt: OptimizerState, cfg: OptimizerConfig) -> None:
    if cfg.optimizer == "adam":
        adam_step(params, opt, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)
    else:
        sgd_step(params, opt, weight_decay=cfg.weight_decay)


def scheduler_step(opt: OptimizerState, cfg: OptimizerConfig, epoch: int) -> None:
    """Set the learning rate for the (0-based) ``epoch`` about to run."""
    if cfg.scheduler == "step_decay":
        opt.lr = opt.base_lr * cfg.gamma_decay ** (epoch // cfg.step_size)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


# -- early stopping --------------------------------------------------------


@dataclass
class TrainerState:
    epoch: int = 0  # completed epochs; epochs are numbered from 1
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    stop: bool = False
    best_checkpoint: Path | None = None
    step: int = 0  # global batch counter
    val_history: list[float] = field(default_factory=list)

    @property
    def improved(self) -> bool:
        """Whether the most recent epoch set a new best."""
        return self.epoch > 0 and self.best_epoch == self.epoch


def early_stop_update(state: TrainerState, val_loss: float, patience: int, min_delta: float = 0.0) -> bool:
    """Record one epoch's validation loss. Returns True to continue, False to stop.

    Improvement is strict: ``val_loss < best_val_loss - min_delta``.
    """
    state.epoch += 1
    state.val_history.append(val_loss)
    if val_loss < state.best_val_loss - min_delta:
        state.best_val_loss = val_loss
        state.best_epoch = state.epoch
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
    if state.epochs_since_improvement >= patience:
        state.stop = True
    return not state.stop


# -- epochs ----------------------------------------------------------------


def weighted_mean(values: Iterable[float], weights: Iterable[int]) -> float:
    values, weights = list(values), list(weights)
    return float(np.dot(values, weights) / np.sum(weights))


def train_one_epoch(
    model: BaseModel,
    batch_iter: Iterable[Batch],
    params: ParamStore,
    opt: OptimizerState,
    opt_cfg: OptimizerConfig,
    *,
    rng: np.random.Generator | None = None,
    clip_norm: float | None = None,
    run: RunHandle | None = None,
    state: TrainerState | None = None,
    log_grad_norms: bool = False,
) -> float:
    """Forward, loss, backward, optional clipping and an optimiser step per batch.

    Returns the batch-size-weighted mean training loss. With ``run`` set,
    gradient norms of the last batch are logged when ``log_grad_norms`` is on.
    """
    state = state if state is not None else TrainerState()
    epoch = state.epoch + 1
    losses, sizes = [], []
    batch_list = list(batch_iter)
    for index, batch in enumerate(batch_list):
        output = model(batch, training=True, rng=rng)
        loss = model.compute_loss(output, batch.target)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLoss(index, value, epoch)
        backward(loss)
        if clip_norm is not None:
            clip_grad_norm(params, clip_norm)
        state.step += 1
        if run is not None and log_grad_norms and index == len(batch_list) - 1:
            log_gradient_norms(run, params, epoch, state.step)
        optimizer_step(params, opt, opt_cfg)
        losses.append(value)
        sizes.append(len(batch))
    return weighted_mean(losses, sizes)


def evaluate_epoch(
    model: BaseModel,
    batch_iter: Iterable[Batch],
    metrics: Iterable[str],
    prefix: str = "val_",
) -> dict[str, float]:
    """Eval-mode loss and metrics, averaged with batch-size weights. Parameters are not touched."""
    metrics = tuple(metrics)
    losses, sizes, per_metric = [], [], {name: [] for name in metrics}
    for batch in batch_iter:
        output = model(batch, training=False)
        losses.append(model.compute_loss(output, batch.target).item())
        sizes.append(len(batch))
        for name, value in compute_metrics(output, batch.target, metrics, model.config.task).items():
            per_metric[name].append(value)
    if not sizes:
        raise ValueError("cannot evaluate an empty dataset")
    out = {f"{prefix}loss": weighted_mean(losses, sizes)}
    for name in metrics:
        out[f"{prefix}{name}"] = weighted_mean(per_metric[name], sizes)
    return out


def checkpoint_if_best(
    state: TrainerState,
    model: BaseModel,
    pipeline: PipelineState,
    bundle: ConfigBundle,
    checkpoint_dir: str | os.PathLike,
) -> bool:
    """Write ``checkpoint_dir/best`` when the latest epoch is the best so far."""
    if not state.improved:
        return False
    state.best_checkpoint = save_checkpoint(Path(checkpoint_dir) / "best", bundle, pipeline, model.state_arrays())
    return True


def restore_best(model: BaseModel, state: TrainerState) -> None:
    path = state.best_checkpoint
    if path is None or not Path(path).is_dir():
        raise NoCheckpoint(f"no best checkpoint at {path}")
    model.load_state_arrays(load_checkpoint(path).arrays)


# -- the loop --------------------------------------------------------------


@dataclass
class FitResult:
    epochs_run: int
    best_epoch: int
    best_val_loss: float
    train_loss: float
    final_metrics: dict[str, float]
    state: TrainerState


class Trainer:
    """Runs epochs until ``max_epochs`` or early stopping, then restores the best weights."""

    def __init__(
        self,
        model: BaseModel,
        bundle: ConfigBundle,
        pipeline: PipelineState,
        checkpoint_dir: str | os.PathLike,
        run: RunHandle | None = None,
    ):
        self.model = model
        self.bundle = bundle
        self.pipeline = pipeline
        self.checkpoint_dir = Path(checkpoint_dir)
        self.run = run
        self.params = model.parameters()
        self.opt = OptimizerState.create(self.params, bundle.model.learning_rate)
        self.state = TrainerState()

    def _log(self, split: str, values: dict[str, float]) -> None:
        if self.run is None:
            return
        for name, value in values.items():
            self.run.log(self.state.epoch, self.state.step, split, name, value)

    def fit(self, train: EncodedDataset, validation: EncodedDataset) -> FitResult:
        cfg, tcfg = self.bundle, self.bundle.trainer
        seed = tcfg.seed
        drop_rng = stream_rng(seed, DROPOUT_STREAM)
        degenerate = cfg.model_kind.uses_batch_norm
        metrics = cfg.model.metrics
        train_loss = math.nan
        val: dict[str, float] = {}
        while self.state.epoch < tcfg.max_epochs and not self.state.stop:
            scheduler_step(self.opt, cfg.optimizer, self.state.epoch)
            train_loss = train_one_epoch(
                self.model,
                batches(train, tcfg.batch_size, shuffle=True, seed=seed, drop_degenerate=degenerate, epoch=self.state.epoch),
                self.params,
                self.opt,
                cfg.optimizer,
                rng=drop_rng,
                clip_norm=tcfg.gradient_clip_norm,
                run=self.run,
                state=self.state,
                log_grad_norms=cfg.experiment.log_gradient_norms,
            )
            val = evaluate_epoch(self.model, batches(validation, tcfg.batch_size), metrics)
            patience = tcfg.early_stopping_patience if tcfg.early_stopping else math.inf
            early_stop_update(self.state, val["val_loss"], patience, tcfg.early_stopping_min_delta)
            self._log("train", {"train_loss": train_loss})
            self._log("val", val)
            if self.run is not None:
                self.run.flush()
            checkpoint_if_best(self.state, self.model, self.pipeline, cfg, self.checkpoint_dir)
            logger.debug("epoch %d train_loss=%.6g val_loss=%.6g", self.state.epoch, train_loss, val["val_loss"])
        restore_best(self.model, self.state)
        return FitResult(
            epochs_run=self.state.epoch,
            best_epoch=self.state.best_epoch,
            best_val_loss=self.state.best_val_loss,
            train_loss=train_loss,
            final_metrics=dict(val),
            state=self.state,
        )
