"""The :class:`TabularModel` facade: configs in, fitted model out."""

from __future__ import annotations

import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tabular.checkpoint import load_checkpoint, save_checkpoint
from tabular.config import (
    ConfigBundle,
    DataConfig,
    ExperimentConfig,
    ModelConfig,
    OptimizerConfig,
    TrainerConfig,
    load_bundle,
    validate,
)
from tabular.data import (
    INIT_STREAM,
    Column,
    EncodedDataset,
    PipelineState,
    TableFrame,
    batches,
    fit_pipeline,
    split_train_val,
    stream_rng,
    transform,
)
from tabular.errors import AlreadyFitted, BadCheckpoint, NotFitted
from tabular.models import BaseModel, DataDims, build_model, predicted_classes
from tabular.tracking import RunHandle, start_run
from tabular.trainer import FitResult, Trainer, TrainerState, evaluate_epoch


@dataclass
class FitReport:
    epochs_run: int
    best_epoch: int
    best_val_loss: float
    final_metrics: dict[str, float]
    train_rows: int
    validation_rows: int
    run_dir: Path | None = None

    def as_dict(self) -> dict:
        return {
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "final_metrics": dict(self.final_metrics),
            "train_rows": self.train_rows,
            "validation_rows": self.validation_rows,
        }


def data_dims(pipeline: PipelineState) -> DataDims:
    n_outputs = pipeline.n_classes if pipeline.task == "classification" else 1
    return DataDims(len(pipeline.continuous_cols), pipeline.cardinalities, n_outputs, pipeline.task)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class TabularModel:
    """Configs, preprocessing, network and trainer behind fit / evaluate / predict.

    Configure it with a validated :class:`ConfigBundle`, a YAML path, or the
    individual config objects::

        model = TabularModel(
            data_config=DataConfig(target="y", continuous_cols=("a", "b")),
            model_config=CategoryEmbeddingModelConfig(task="classification"),
        )
        model.fit(train)
        preds = model.predict(test)
    """

    def __init__(
        self,
        config: ConfigBundle | str | os.PathLike | None = None,
        *,
        data_config: DataConfig | None = None,
        model_config: ModelConfig | None = None,
        trainer_config: TrainerConfig | None = None,
        optimizer_config: OptimizerConfig | None = None,
        experiment_config: ExperimentConfig | None = None,
    ):
        sections = (data_config, model_config, trainer_config, optimizer_config, experiment_config)
        if config is not None and any(s is not None for s in sections):
            raise TypeError("pass either a bundle/YAML path or config objects, not both")
        if isinstance(config, ConfigBundle):
            bundle = config
        elif config is not None:
            bundle = load_bundle(config)
        else:
            bundle = validate(
                data=data_config, model=model_config, trainer=trainer_config,
                optimizer=optimizer_config, experiment=experiment_config,
            )
        self.config: ConfigBundle = bundle
        self.pipeline: PipelineState | None = None
        self.model: BaseModel | None = None
        self.trainer_state: TrainerState | None = None
        self.run: RunHandle | None = None

    @property
    def fitted(self) -> bool:
        return self.model is not None

    def _require_fitted(self) -> None:
        if not self.fitted:
            raise NotFitted("call fit() or load_from_checkpoint() first")

    # -- training -----------------------------------------------------------

    def fit(self, train: TableFrame, validation: TableFrame | None = None) -> FitReport:
        """Fit preprocessing and network; returns a summary of the run.

        Without ``validation`` a random ``data.validation_split`` share of
        ``train`` is held out. Preprocessing statistics come from the
        remaining training rows only.
        """
        if self.fitted:
            raise AlreadyFitted("this TabularModel has already been fitted")
        cfg = self.config
        seed = cfg.trainer.seed
        if validation is None:
            train_idx, val_idx = split_train_val(train, cfg.data.validation_split, seed)
            train, validation = train.take(train_idx), train.take(val_idx)

        pipeline = fit_pipeline(train, cfg.data, cfg.model_kind, seed, cfg.model.task)
        train_ds = transform(train, pipeline, mode="train")
        val_ds = transform(validation, pipeline, mode="inference", require_target=True)
        model = build_model(cfg.model, data_dims(pipeline), stream_rng(seed, INIT_STREAM))

        scratch = None
        if cfg.trainer.checkpoint_dir is None:
            scratch = tempfile.mkdtemp(prefix="tabular-ckpt-")
        run = start_run(cfg.experiment, cfg)
        try:
            trainer = Trainer(model, cfg, pipeline, cfg.trainer.checkpoint_dir or scratch, run)
            result: FitResult = trainer.fit(train_ds, val_ds)
        finally:
            run.close()
            if scratch is not None:
                shutil.rmtree(scratch, ignore_errors=True)

        self.pipeline, self.model, self.run = pipeline, model, run
        self.trainer_state = result.state
        final = {"train_loss": result.train_loss, **result.final_metrics}
        return FitReport(
            epochs_run=result.epochs_run,
            best_epoch=result.best_epoch,
            best_val_loss=result.best_val_loss,
            final_metrics=final,
            train_rows=len(train_ds),
            validation_rows=len(val_ds),
            run_dir=run.path,
        )

    # -- inference ----------------------------------------------------------

    def _logits(self, ds: EncodedDataset) -> np.ndarray:
        parts = [self.model(batch, training=False).logits.data for batch in batches(ds, self.config.trainer.batch_size)]
        if not parts:
            return np.zeros((0, data_dims(self.pipeline).n_outputs))
        return np.concatenate(parts, axis=0)

    def evaluate(self, test: TableFrame) -> dict[str, float]:
        """Loss and configured metrics on ``test``, keyed ``test_loss``, ``test_<metric>``."""
        self._require_fitted()
        ds = transform(test, self.pipeline, mode="inference", require_target=True)
        return evaluate_epoch(self.model, batches(ds, self.config.trainer.batch_size), self.config.model.metrics, prefix="test_")

    def predict(self, data: TableFrame) -> TableFrame:
        """Input columns plus ``prob_<label>`` columns (classification) and ``prediction``."""
        self._require_fitted()
        ds = transform(data, self.pipeline, mode="inference")
        logits = self._logits(ds)
        rows = len(ds)
        if self.pipeline.task == "regression":
            pred = logits[:, 0].copy()
            return data.with_columns([Column("prediction", "float", pred, np.zeros(rows, dtype=bool))])

        probs = _softmax(logits)
        extra = [
            Column(f"prob_{key}", "float", probs[:, k].copy(), np.zeros(rows, dtype=bool))
            for k, key in enumerate(self.pipeline.class_keys())
        ]
        labels = self.pipeline.class_labels()
        dtype = self.pipeline.target_dtype
        vocab = np.array(labels, dtype=np.float64 if dtype in ("float", "integer") else object)
        classes = predicted_classes(logits)
        extra.append(Column("prediction", dtype, vocab[classes], np.zeros(rows, dtype=bool)))
        return data.with_columns(extra)

    # -- persistence --------------------------------------------------------

    def save_model(self, directory: str | os.PathLike) -> Path:
        self._require_fitted()
        return save_checkpoint(directory, self.config, self.pipeline, self.model.state_arrays())

    @classmethod
    def load_from_checkpoint(cls, directory: str | os.PathLike) -> TabularModel:
        ckpt = load_checkpoint(directory)
        obj = cls(ckpt.bundle)
        seed = ckpt.bundle.trainer.seed
        model = build_model(ckpt.bundle.model, data_dims(ckpt.pipeline), stream_rng(seed, INIT_STREAM))
        try:
            model.load_state_arrays(ckpt.arrays)
        except (KeyError, ValueError) as exc:
            raise BadCheckpoint(f"weights do not match the configured model: {exc}") from exc
        obj.pipeline, obj.model = ckpt.pipeline, model
        return obj
