"""The five configuration types, YAML loading and validation.

Configs can be built programmatically::

    bundle = validate(
        data=DataConfig(target=["y"], continuous_cols=["x"]),
        model=CategoryEmbeddingModelConfig(task="regression"),
    )

or parsed from a YAML file with sections ``data``, ``model``, ``trainer``,
``optimizer`` and ``experiment`` (``validate(load_config_file(path))``).
Both routes produce the same frozen :class:`ConfigBundle`.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, ClassVar, Mapping

import yaml

from tabular.errors import (
    DisjointnessViolation,
    IncompatibleLossTask,
    InvalidValue,
    MalformedYaml,
    UnknownModelType,
    UnknownTopLevelKey,
)

logger = logging.getLogger(__name__)

SECTIONS = ("data", "model", "trainer", "optimizer", "experiment")
TASKS = ("classification", "regression")
LOSS_FOR_TASK = {"classification": "cross_entropy", "regression": "mse"}
METRICS_FOR_TASK = {"classification": ("accuracy",), "regression": ("mse",)}
_U64_MAX = 2**64 - 1


@dataclass(frozen=True)
class DataConfig:
    target: tuple[str, ...] = ()
    continuous_cols: tuple[str, ...] = ()
    categorical_cols: tuple[str, ...] = ()
    normalization: str = "standard"
    validation_split: float = 0.2
    # multiplicative gaussian noise on training leave-one-out codes; 0 disables
    loo_noise_std: float = 0.0


@dataclass(frozen=True, kw_only=True)
class ModelConfig:
    """Parameters common to every architecture. Use one of the subclasses."""

    model_type: ClassVar[str] = ""

    task: str
    learning_rate: float = 1e-3
    loss: str | None = None
    metrics: tuple[str, ...] | None = None


@dataclass(frozen=True, kw_only=True)
class CategoryEmbeddingModelConfig(ModelConfig):
    model_type: ClassVar[str] = "category_embedding"

    layer_sizes: tuple[int, ...] = (64, 32)
    dropout: float = 0.0
    use_batch_norm: bool = True
    embedding_dims: tuple[int, ...] | None = None


@dataclass(frozen=True, kw_only=True)
class NodeConfig(ModelConfig):
    model_type: ClassVar[str] = "node"

    num_trees: int = 32
    depth: int = 4
    tree_output_dim: int = 3
    num_layers: int = 1
    categorical_mode: str = "leave_one_out"


@dataclass(frozen=True, kw_only=True)
class TabNetModelConfig(ModelConfig):
    model_type: ClassVar[str] = "tabnet"

    n_d: int = 8
    n_a: int = 8
    n_steps: int = 3
    gamma: float = 1.3
    n_shared_glu: int = 2
    n_step_glu: int = 2
    lambda_sparse: float = 1e-3
    mask_epsilon: float = 1e-10


@dataclass(frozen=True, kw_only=True)
class AutoIntConfig(ModelConfig):
    model_type: ClassVar[str] = "autoint"

    embed_dim: int = 16
    num_heads: int = 2
    num_attn_layers: int = 3
    use_residual: bool = True


MODEL_CONFIGS: dict[str, type[ModelConfig]] = {
    cls.model_type: cls
    for cls in (CategoryEmbeddingModelConfig, NodeConfig, TabNetModelConfig, AutoIntConfig)
}


@dataclass(frozen=True)
class TrainerConfig:
    batch_size: int = 64
    max_epochs: int = 100
    early_stopping: bool = True
    early_stopping_patience: int = 3
    early_stopping_min_delta: float = 0.0
    gradient_clip_norm: float | None = None
    seed: int = 42
    checkpoint_dir: str | None = None
    # accepted for compatibility with GPU-oriented configs; training is CPU only
    gpus: int | None = None


@dataclass(frozen=True)
class OptimizerConfig:
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    scheduler: str = "none"
    step_size: int = 10
    gamma_decay: float = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    project_name: str = "tabular"
    run_name: str | None = None
    log_gradient_norms: bool = False
    log_dir: str = "runs"


class ModelKind(enum.Enum):
    CATEGORY_EMBEDDING = "category_embedding"
    NODE_LEAVE_ONE_OUT = "node_leave_one_out"
    NODE_EMBEDDING = "node_embedding"
    TABNET = "tabnet"
    AUTOINT = "autoint"

    @property
    def uses_leave_one_out(self) -> bool:
        return self is ModelKind.NODE_LEAVE_ONE_OUT

    @property
    def uses_batch_norm(self) -> bool:
        return self in (ModelKind.CATEGORY_EMBEDDING, ModelKind.TABNET)


_BUNDLE_TOKEN = object()


@dataclass(frozen=True)
class ConfigBundle:
    """Validated, immutable set of the five configs. Build it with :func:`validate`."""

    data: DataConfig
    model: ModelConfig
    trainer: TrainerConfig
    optimizer: OptimizerConfig
    experiment: ExperimentConfig
    provenance: Mapping[str, str] = field(default_factory=dict, compare=False, repr=False)
    _token: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self._token is not _BUNDLE_TOKEN:
            raise TypeError("ConfigBundle is only constructible via tabular.config.validate()")

    @property
    def model_kind(self) -> ModelKind:
        return resolve_model(self.model)

    def to_raw(self) -> dict[str, Any]:
        """Plain nested dict with every field spelled out; feeds back into validate()."""
        model = {"type": self.model.model_type}
        model.update(_section_to_raw(self.model))
        return {
            "data": _section_to_raw(self.data),
            "model": model,
            "trainer": _section_to_raw(self.trainer),
            "optimizer": _section_to_raw(self.optimizer),
            "experiment": _section_to_raw(self.experiment),
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_raw(), sort_keys=False)

    def replace(self, section: str, **changes) -> ConfigBundle:
        """Copy with some fields of one section changed, re-validated."""
        raw = self.to_raw()
        raw[section].update(changes)
        return validate(raw)


def _section_to_raw(cfg) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


# -- YAML ------------------------------------------------------------------


def load_config_file(path: str | os.PathLike) -> dict[str, Any]:
    """Parse a YAML config file into a raw tree. No defaults are applied."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    return parse_config_text(text)


def parse_config_text(text: str) -> dict[str, Any]:
    try:
        tree = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise MalformedYaml(mark.line + 1 if mark else None, str(exc.problem or exc)) from exc
    except yaml.YAMLError as exc:
        raise MalformedYaml(None, str(exc)) from exc
    if tree is None:
        return {}
    if not isinstance(tree, dict):
        raise MalformedYaml(None, "top level must be a mapping of sections")
    for key in tree:
        if key not in SECTIONS:
            raise UnknownTopLevelKey(str(key))
        if tree[key] is None:
            tree[key] = {}
        elif not isinstance(tree[key], dict):
            raise MalformedYaml(None, f"section {key!r} must be a mapping")
    return tree


# -- coercion helpers ------------------------------------------------------


def _as_float(name: str, value) -> float:
    if isinstance(value, bool):
        raise InvalidValue(name, f"expected a number, got {value!r}")
    if isinstance(value, str):
        # PyYAML reads "1e-3" as a string
        try:
            value = float(value)
        except ValueError:
            raise InvalidValue(name, f"expected a number, got {value!r}") from None
    if not isinstance(value, (int, float)) or not math.isfinite(value):
        raise InvalidValue(name, f"expected a finite number, got {value!r}")
    return float(value)


def _as_int(name: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise InvalidValue(name, f"expected an integer, got {value!r}")
    return value


def _as_bool(name: str, value) -> bool:
    if not isinstance(value, bool):
        raise InvalidValue(name, f"expected true/false, got {value!r}")
    return value


def _as_str(name: str, value) -> str:
    if not isinstance(value, str):
        raise InvalidValue(name, f"expected a string, got {value!r}")
    return value


def _as_names(name: str, value) -> tuple[str, ...]:
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, (list, tuple)):
        raise InvalidValue(name, f"expected a list of column names, got {value!r}")
    out = []
    for v in value:
        if not isinstance(v, str) or not v:
            raise InvalidValue(name, f"column names must be non-empty strings, got {v!r}")
        out.append(v)
    if len(set(out)) != len(out):
        raise InvalidValue(name, "duplicate column name")
    return tuple(out)


def _as_int_list(name: str, value) -> tuple[int, ...]:
    if not isinstance(value, (list, tuple)):
        raise InvalidValue(name, f"expected a list of integers, got {value!r}")
    out = tuple(_as_int(name, v) for v in value)
    if any(v < 1 for v in out):
        raise InvalidValue(name, "all sizes must be >= 1")
    return out


def _choice(name: str, value, options) -> str:
    value = _as_str(name, value)
    if value not in options:
        raise InvalidValue(name, f"must be one of {sorted(options)}, got {value!r}")
    return value


def _positive(name: str, value: float | int, strict: bool = True):
    if value <= 0 if strict else value < 0:
        raise InvalidValue(name, "must be > 0" if strict else "must be >= 0")
    return value


def _check_keys(section: str, raw: Mapping, allowed) -> None:
    for key in raw:
        if key not in allowed:
            raise InvalidValue(f"{section}.{key}", "unknown key")


# -- per-section validation ------------------------------------------------


def _validate_data(raw: Mapping) -> DataConfig:
    fields_ = {f.name for f in dataclasses.fields(DataConfig)}
    _check_keys("data", raw, fields_)
    target = _as_names("data.target", raw.get("target", ()))
    cont = _as_names("data.continuous_cols", raw.get("continuous_cols", ()))
    cat = _as_names("data.categorical_cols", raw.get("categorical_cols", ()))
    seen: set[str] = set()
    for col in (*target, *cont, *cat):
        if col in seen:
            raise DisjointnessViolation(col)
        seen.add(col)
    norm = _choice("data.normalization", raw.get("normalization", "standard"), ("standard", "minmax", "none"))
    split = _as_float("data.validation_split", raw.get("validation_split", 0.2))
    if not 0.0 < split < 1.0:
        raise InvalidValue("data.validation_split", "must be in (0, 1)")
    noise = _positive("data.loo_noise_std", _as_float("data.loo_noise_std", raw.get("loo_noise_std", 0.0)), strict=False)
    return DataConfig(target, cont, cat, norm, split, noise)


def resolve_model(model) -> ModelKind:
    """Architecture tag for a validated model config (or a bare type string)."""
    if isinstance(model, str):
        if model not in MODEL_CONFIGS:
            raise UnknownModelType(model)
        if model == "node":
            return ModelKind.NODE_LEAVE_ONE_OUT
        return ModelKind(model)
    if isinstance(model, NodeConfig):
        return ModelKind.NODE_LEAVE_ONE_OUT if model.categorical_mode == "leave_one_out" else ModelKind.NODE_EMBEDDING
    if isinstance(model, ModelConfig) and model.model_type in MODEL_CONFIGS:
        return ModelKind(model.model_type)
    raise UnknownModelType(getattr(model, "model_type", type(model).__name__))


def _validate_model(raw: Mapping) -> ModelConfig:
    raw = dict(raw)
    mtype = raw.pop("type", "category_embedding")
    if not isinstance(mtype, str) or mtype not in MODEL_CONFIGS:
        raise UnknownModelType(str(mtype))
    cls = MODEL_CONFIGS[mtype]
    _check_keys("model", raw, {f.name for f in dataclasses.fields(cls)})
    if "task" not in raw:
        raise InvalidValue("model.task", "required (classification or regression)")
    task = _choice("model.task", raw["task"], TASKS)
    lr = _positive("model.learning_rate", _as_float("model.learning_rate", raw.get("learning_rate", 1e-3)))
    loss = raw.get("loss")
    if loss is None:
        loss = LOSS_FOR_TASK[task]
    else:
        loss = _choice("model.loss", loss, ("cross_entropy", "mse"))
        if loss != LOSS_FOR_TASK[task]:
            raise IncompatibleLossTask(loss, task)
    metrics = raw.get("metrics")
    if metrics is None:
        metrics = METRICS_FOR_TASK[task]
    else:
        if isinstance(metrics, str):
            metrics = [metrics]
        metrics = tuple(_choice("model.metrics", m, ("accuracy", "mse")) for m in metrics)
        if task == "regression" and "accuracy" in metrics:
            raise InvalidValue("model.metrics", "accuracy is undefined for regression")
    common = dict(task=task, learning_rate=lr, loss=loss, metrics=tuple(metrics))

    def dim(key):
        return _positive(f"model.{key}", _as_int(f"model.{key}", raw.get(key, getattr(cls, key))))

    if cls is CategoryEmbeddingModelConfig:
        layers = _as_int_list("model.layer_sizes", raw.get("layer_sizes", cls.layer_sizes))
        dropout = _as_float("model.dropout", raw.get("dropout", cls.dropout))
        if not 0.0 <= dropout < 1.0:
            raise InvalidValue("model.dropout", "must be in [0, 1)")
        emb = raw.get("embedding_dims")
        emb = None if emb is None else _as_int_list("model.embedding_dims", emb)
        return cls(
            **common, layer_sizes=layers, dropout=dropout,
            use_batch_norm=_as_bool("model.use_batch_norm", raw.get("use_batch_norm", cls.use_batch_norm)),
            embedding_dims=emb,
        )
    if cls is NodeConfig:
        mode = _choice("model.categorical_mode", raw.get("categorical_mode", cls.categorical_mode), ("leave_one_out", "embedding"))
        return cls(
            **common, num_trees=dim("num_trees"), depth=dim("depth"),
            tree_output_dim=dim("tree_output_dim"), num_layers=dim("num_layers"), categorical_mode=mode,
        )
    if cls is TabNetModelConfig:
        gamma = _as_float("model.gamma", raw.get("gamma", cls.gamma))
        if gamma < 1.0:
            raise InvalidValue("model.gamma", "must be >= 1")
        lam = _positive("model.lambda_sparse", _as_float("model.lambda_sparse", raw.get("lambda_sparse", cls.lambda_sparse)), strict=False)
        eps = _positive("model.mask_epsilon", _as_float("model.mask_epsilon", raw.get("mask_epsilon", cls.mask_epsilon)))
        return cls(
            **common, n_d=dim("n_d"), n_a=dim("n_a"), n_steps=dim("n_steps"), gamma=gamma,
            n_shared_glu=dim("n_shared_glu"), n_step_glu=dim("n_step_glu"),
            lambda_sparse=lam, mask_epsilon=eps,
        )
    # AutoInt; divisibility of embed_dim by num_heads is checked when the network is built
    return cls(
        **common, embed_dim=dim("embed_dim"), num_heads=dim("num_heads"),
        num_attn_layers=dim("num_attn_layers"),
        use_residual=_as_bool("model.use_residual", raw.get("use_residual", cls.use_residual)),
    )


def _validate_trainer(raw: Mapping) -> TrainerConfig:
    _check_keys("trainer", raw, {f.name for f in dataclasses.fields(TrainerConfig)})
    d = TrainerConfig()
    batch = _positive("trainer.batch_size", _as_int("trainer.batch_size", raw.get("batch_size", d.batch_size)))
    epochs = _positive("trainer.max_epochs", _as_int("trainer.max_epochs", raw.get("max_epochs", d.max_epochs)))
    patience = _positive(
        "trainer.early_stopping_patience",
        _as_int("trainer.early_stopping_patience", raw.get("early_stopping_patience", d.early_stopping_patience)),
    )
    min_delta = _positive(
        "trainer.early_stopping_min_delta",
        _as_float("trainer.early_stopping_min_delta", raw.get("early_stopping_min_delta", 0.0)),
        strict=False,
    )
    clip = raw.get("gradient_clip_norm")
    if clip is not None:
        clip = _positive("trainer.gradient_clip_norm", _as_float("trainer.gradient_clip_norm", clip))
    seed = _as_int("trainer.seed", raw.get("seed", d.seed))
    if not 0 <= seed <= _U64_MAX:
        raise InvalidValue("trainer.seed", "must be an unsigned 64-bit integer")
    ckpt = raw.get("checkpoint_dir")
    ckpt = None if ckpt is None else _as_str("trainer.checkpoint_dir", str(ckpt) if isinstance(ckpt, Path) else ckpt)
    gpus = raw.get("gpus")
    if gpus is not None:
        gpus = _as_int("trainer.gpus", gpus)
        if gpus:
            logger.warning("trainer.gpus=%s is ignored: training runs on the CPU", gpus)
    return TrainerConfig(
        batch_size=batch, max_epochs=epochs,
        early_stopping=_as_bool("trainer.early_stopping", raw.get("early_stopping", d.early_stopping)),
        early_stopping_patience=patience, early_stopping_min_delta=min_delta,
        gradient_clip_norm=clip, seed=seed, checkpoint_dir=ckpt, gpus=gpus,
    )


def _validate_optimizer(raw: Mapping) -> OptimizerConfig:
    _check_keys("optimizer", raw, {f.name for f in dataclasses.fields(OptimizerConfig)})
    d = OptimizerConfig()
    b1 = _as_float("optimizer.beta1", raw.get("beta1", d.beta1))
    b2 = _as_float("optimizer.beta2", raw.get("beta2", d.beta2))
    for name, b in (("optimizer.beta1", b1), ("optimizer.beta2", b2)):
        if not 0.0 <= b < 1.0:
            raise InvalidValue(name, "must be in [0, 1)")
    return OptimizerConfig(
        optimizer=_choice("optimizer.optimizer", raw.get("optimizer", d.optimizer), ("adam", "sgd")),
        beta1=b1,
        beta2=b2,
        eps=_positive("optimizer.eps", _as_float("optimizer.eps", raw.get("eps", d.eps))),
        weight_decay=_positive(
            "optimizer.weight_decay", _as_float("optimizer.weight_decay", raw.get("weight_decay", d.weight_decay)), strict=False
        ),
        scheduler=_choice("optimizer.scheduler", raw.get("scheduler", d.scheduler), ("none", "step_decay")),
        step_size=_positive("optimizer.step_size", _as_int("optimizer.step_size", raw.get("step_size", d.step_size))),
        gamma_decay=_positive("optimizer.gamma_decay", _as_float("optimizer.gamma_decay", raw.get("gamma_decay", d.gamma_decay))),
    )


def _validate_experiment(raw: Mapping) -> ExperimentConfig:
    _check_keys("experiment", raw, {f.name for f in dataclasses.fields(ExperimentConfig)})
    d = ExperimentConfig()
    project = _as_str("experiment.project_name", raw.get("project_name", d.project_name))
    if not project.strip():
        raise InvalidValue("experiment.project_name", "must be non-empty")
    run_name = raw.get("run_name")
    if run_name is not None:
        run_name = _as_str("experiment.run_name", run_name)
    log_dir = raw.get("log_dir", d.log_dir)
    return ExperimentConfig(
        project_name=project,
        run_name=run_name,
        log_gradient_norms=_as_bool("experiment.log_gradient_norms", raw.get("log_gradient_norms", d.log_gradient_norms)),
        log_dir=_as_str("experiment.log_dir", str(log_dir) if isinstance(log_dir, Path) else log_dir),
    )


_SECTION_VALIDATORS = {
    "data": _validate_data,
    "model": _validate_model,
    "trainer": _validate_trainer,
    "optimizer": _validate_optimizer,
    "experiment": _validate_experiment,
}


def _programmatic_raw(section: str, cfg) -> tuple[dict[str, Any], set[str]]:
    """Raw dict for a config object plus the names of fields that differ from defaults."""
    raw = _section_to_raw(cfg)
    if section == "model":
        user = {k for k, v in raw.items() if k != "task" and v != _default_of(type(cfg), k)} | {"task"}
        raw["type"] = cfg.model_type
        for key in ("loss", "metrics"):
            if raw[key] is None:
                del raw[key]
    else:
        defaults = _section_to_raw(type(cfg)())
        user = {k for k, v in raw.items() if v != defaults[k]}
    return raw, user


def _default_of(cls, name: str):
    f = next(f for f in dataclasses.fields(cls) if f.name == name)
    value = f.default if f.default is not dataclasses.MISSING else None
    return list(value) if isinstance(value, tuple) else value


def validate(
    raw: Mapping[str, Any] | None = None,
    *,
    data: DataConfig | None = None,
    model: ModelConfig | None = None,
    trainer: TrainerConfig | None = None,
    optimizer: OptimizerConfig | None = None,
    experiment: ExperimentConfig | None = None,
) -> ConfigBundle:
    """Fill defaults, check every invariant, and freeze the result.

    Pass either a raw tree (from YAML or :meth:`ConfigBundle.to_raw`) or the
    config objects as keyword arguments; sections left out take defaults.
    The bundle's ``provenance`` maps ``section.field`` to ``"user"``,
    ``"default"`` or ``"derived"`` (loss and metrics filled in from the task).
    """
    objects = dict(data=data, model=model, trainer=trainer, optimizer=optimizer, experiment=experiment)
    if raw is not None and any(v is not None for v in objects.values()):
        raise TypeError("pass either a raw tree or config objects, not both")
    if isinstance(raw, ConfigBundle):
        raw = raw.to_raw()

    trees: dict[str, dict[str, Any]] = {}
    user_keys: dict[str, set[str]] = {}
    if raw is not None:
        for key in raw:
            if key not in SECTIONS:
                raise UnknownTopLevelKey(str(key))
        for section in SECTIONS:
            tree = raw.get(section) or {}
            if not isinstance(tree, Mapping):
                raise InvalidValue(section, "section must be a mapping")
            trees[section] = dict(tree)
            user_keys[section] = set(tree)
    else:
        for section, obj in objects.items():
            if obj is None:
                trees[section], user_keys[section] = {}, set()
            else:
                trees[section], user_keys[section] = _programmatic_raw(section, obj)

    sections = {name: _SECTION_VALIDATORS[name](trees[name]) for name in SECTIONS}

    if sections["model"] is not None and resolve_model(sections["model"]).uses_batch_norm:
        if sections["trainer"].batch_size < 2:
            raise InvalidValue("trainer.batch_size", "must be >= 2 for models that use batch normalisation")

    provenance: dict[str, str] = {}
    for name, cfg in sections.items():
        for f in dataclasses.fields(cfg):
            provenance[f"{name}.{f.name}"] = "user" if f.name in user_keys[name] else "default"
    for key in ("loss", "metrics"):
        if key not in user_keys["model"]:
            provenance[f"model.{key}"] = "derived"

    return ConfigBundle(**sections, provenance=MappingProxyType(provenance), _token=_BUNDLE_TOKEN)


def load_bundle(path: str | os.PathLike) -> ConfigBundle:
    return validate(load_config_file(path))
