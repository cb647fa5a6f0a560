"""Tables, preprocessing and batching.

A :class:`PipelineState` is fitted once on training rows and then applied
unchanged to training, validation and inference frames, so every split
sees identical vocabularies, scaling statistics and target codes.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from tabular.config import DataConfig, ModelKind
from tabular.errors import (
    AlreadyFitted,
    EmptyFile,
    MissingColumn,
    NonNumericContinuous,
    NotFitted,
    NullTarget,
    RaggedRow,
    TooFewRows,
    UnseenTargetLabel,
)

NULL_CATEGORY = "␀null␀"
UNKNOWN_INDEX = 0

# offsets added to the session seed for each independent random stream
SPLIT_STREAM = 1
SHUFFLE_STREAM = 2
DROPOUT_STREAM = 3
INIT_STREAM = 4


def stream_rng(seed: int, offset: int, *extra: int) -> np.random.Generator:
    """PCG64 generator for one named stream of a training session.

    Seeded through numpy's ``SeedSequence`` from ``(seed + offset, *extra)``,
    which is stable across numpy releases.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([(seed + offset) % 2**64, *extra])))


# -- TableFrame ------------------------------------------------------------


@dataclass
class Column:
    name: str
    dtype: str  # "float" | "integer" | "text"
    values: np.ndarray  # float64 (NaN at nulls) or object array of str (None at nulls)
    mask: np.ndarray  # True where null

    def __len__(self) -> int:
        return len(self.values)

    @property
    def is_numeric(self) -> bool:
        return self.dtype in ("float", "integer")

    def take(self, indices) -> Column:
        return Column(self.name, self.dtype, self.values[indices], self.mask[indices])

    def category_keys(self) -> np.ndarray:
        """String key per row used for vocabularies and label maps."""
        keys = np.empty(len(self), dtype=object)
        for i, (v, null) in enumerate(zip(self.values, self.mask)):
            keys[i] = NULL_CATEGORY if null else format_key(v, self.dtype)
        return keys

    def to_python(self) -> list:
        out = []
        for v, null in zip(self.values, self.mask):
            if null:
                out.append(None)
            elif self.dtype == "integer":
                out.append(int(v))
            elif self.dtype == "float":
                out.append(float(v))
            else:
                out.append(v)
        return out


def format_key(value, dtype: str) -> str:
    if dtype == "integer":
        return str(int(value))
    if dtype == "float":
        return repr(float(value))
    return str(value)


def parse_key(key: str, dtype: str):
    if dtype == "integer":
        return int(key)
    if dtype == "float":
        return float(key)
    return key


def _number(token: str) -> float | None:
    try:
        value = float(token)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def _is_int_token(token: str) -> bool:
    try:
        int(token)
    except ValueError:
        return False
    return True


def column_from_values(name: str, values: Sequence[Any]) -> Column:
    """Infer a column from Python values; ``None``/NaN/empty string are nulls."""
    n = len(values)
    mask = np.zeros(n, dtype=bool)
    for i, v in enumerate(values):
        if v is None or (isinstance(v, float) and math.isnan(v)) or (isinstance(v, str) and v == ""):
            mask[i] = True
    present = [v for v, null in zip(values, mask) if not null]
    if all(isinstance(v, (int, np.integer)) and not isinstance(v, bool) for v in present) and present:
        dtype = "integer"
    elif all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in present) and present:
        dtype = "float"
    elif all(isinstance(v, str) for v in present) and present:
        # strings that all parse as numbers are numbers, as in CSV input
        nums = [_number(v) for v in present]
        if all(x is not None for x in nums):
            dtype = "integer" if all(_is_int_token(v) for v in present) else "float"
            values = [None if null else _number(v) for v, null in zip(values, mask)]
        else:
            dtype = "text"
    elif not present:
        dtype = "float"
    else:
        dtype = "text"
    if dtype == "text":
        arr = np.empty(n, dtype=object)
        for i, (v, null) in enumerate(zip(values, mask)):
            arr[i] = None if null else str(v)
    else:
        arr = np.array([np.nan if null else float(v) for v, null in zip(values, mask)], dtype=np.float64)
    return Column(name, dtype, arr, mask)


class TableFrame:
    """Column-oriented table. Column order is preserved; names are unique."""

    def __init__(self, columns: Sequence[Column]):
        names = [c.name for c in columns]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate column names in {names}")
        lengths = {len(c) for c in columns}
        if len(lengths) > 1:
            raise ValueError(f"columns have different lengths: {sorted(lengths)}")
        self._columns = {c.name: c for c in columns}
        self.row_count = lengths.pop() if lengths else 0

    @classmethod
    def from_dict(cls, data: Mapping[str, Sequence[Any]]) -> TableFrame:
        return cls([column_from_values(name, list(values)) for name, values in data.items()])

    @property
    def names(self) -> list[str]:
        return list(self._columns)

    @property
    def columns(self) -> list[Column]:
        return list(self._columns.values())

    def __len__(self) -> int:
        return self.row_count

    def __contains__(self, name: str) -> bool:
        return name in self._columns

    def __getitem__(self, name: str) -> Column:
        try:
            return self._columns[name]
        except KeyError:
            raise MissingColumn(name) from None

    def __repr__(self) -> str:
        return f"TableFrame(rows={self.row_count}, columns={self.names})"

    def take(self, indices) -> TableFrame:
        indices = np.asarray(indices, dtype=np.intp)
        return TableFrame([c.take(indices) for c in self._columns.values()])

    def with_columns(self, extra: Sequence[Column]) -> TableFrame:
        cols = [c for c in self._columns.values() if c.name not in {e.name for e in extra}]
        return TableFrame(cols + list(extra))

    def to_dict(self) -> dict[str, list]:
        return {name: col.to_python() for name, col in self._columns.items()}

    def to_csv(self, path: str | os.PathLike | None = None) -> str | None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.names)
        cols = self.columns
        for i in range(self.row_count):
            row = []
            for c in cols:
                if c.mask[i]:
                    row.append("")
                else:
                    row.append(format_key(c.values[i], c.dtype))
            writer.writerow(row)
        text = buf.getvalue()
        if path is None:
            return text
        Path(path).write_text(text, encoding="utf-8")
        return None


def read_csv(path: str | os.PathLike) -> TableFrame:
    """Read a header-first, comma-delimited UTF-8 CSV.

    Columns whose non-empty cells all parse as numbers become numeric
    (``integer`` when every cell is an integer literal); everything else is
    text. Empty cells are nulls.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"CSV file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        return parse_csv(fh)


def parse_csv(fh) -> TableFrame:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyFile("CSV has no header row") from None
    if not header or header == [""]:
        raise EmptyFile("CSV header is empty")
    cells: list[list[str]] = [[] for _ in header]
    for row in reader:
        if not row:
            continue
        if len(row) != len(header):
            raise RaggedRow(reader.line_num, len(header), len(row))
        for j, tok in enumerate(row):
            cells[j].append(tok)
    columns = []
    for name, tokens in zip(header, cells):
        columns.append(_column_from_tokens(name, tokens))
    return TableFrame(columns)


def _column_from_tokens(name: str, tokens: list[str]) -> Column:
    mask = np.array([t == "" for t in tokens], dtype=bool)
    present = [t for t in tokens if t != ""]
    numbers = [_number(t) for t in present]
    if present and all(x is not None for x in numbers):
        dtype = "integer" if all(_is_int_token(t) for t in present) else "float"
        values = np.array([np.nan if t == "" else float(t) for t in tokens], dtype=np.float64)
        return Column(name, dtype, values, mask)
    if not present:
        return Column(name, "float", np.full(len(tokens), np.nan), mask)
    values = np.empty(len(tokens), dtype=object)
    for i, t in enumerate(tokens):
        values[i] = None if t == "" else t
    return Column(name, "text", values, mask)


# -- splitting -------------------------------------------------------------


def validation_size(rows: int, fraction: float) -> int:
    # round half up, at least one row, and always leave one for training
    return min(max(1, int(math.floor(rows * fraction + 0.5))), rows - 1)


def split_train_val(frame: TableFrame | int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random disjoint (train, validation) row indices, each sorted ascending."""
    rows = frame if isinstance(frame, int) else frame.row_count
    if rows < 2:
        raise TooFewRows(f"need at least 2 rows to split, got {rows}")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n_val = validation_size(rows, fraction)
    perm = stream_rng(seed, SPLIT_STREAM).permutation(rows)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


# -- pipeline --------------------------------------------------------------


@dataclass
class PipelineState:
    """Everything learned from the training rows."""

    continuous_cols: tuple[str, ...] = ()
    categorical_cols: tuple[str, ...] = ()
    target_col: str | None = None
    task: str = "regression"
    normalization: str = "standard"
    vocab: dict[str, dict[str, int]] = field(default_factory=dict)
    loo_stats: dict[str, Any] | None = None
    cont_stats: dict[str, tuple[float, float]] = field(default_factory=dict)
    impute: dict[str, float] = field(default_factory=dict)
    target_map: dict[str, int] | None = None
    target_dtype: str = "float"
    loo_noise_std: float = 0.0
    seed: int = 0
    fitted: bool = False

    @property
    def cardinalities(self) -> tuple[int, ...]:
        """Number of known categories per categorical column (excluding the unknown slot)."""
        return tuple(len(self.vocab[c]) for c in self.categorical_cols)

    @property
    def n_classes(self) -> int:
        return len(self.target_map) if self.target_map else 0

    @property
    def uses_leave_one_out(self) -> bool:
        return self.loo_stats is not None

    def class_labels(self) -> list:
        """Original target labels ordered by class index."""
        keys = sorted(self.target_map, key=self.target_map.__getitem__)
        return [parse_key(k, self.target_dtype) for k in keys]

    def class_keys(self) -> list[str]:
        return sorted(self.target_map, key=self.target_map.__getitem__)

    def fit(self, train: TableFrame, cfg: DataConfig, model_kind: ModelKind, seed: int, task: str) -> PipelineState:
        if self.fitted:
            raise AlreadyFitted("pipeline state has already been fitted")
        if not cfg.target:
            raise MissingColumn("<target>")
        for name in (*cfg.target, *cfg.continuous_cols, *cfg.categorical_cols):
            if name not in train:
                raise MissingColumn(name)
        if len(cfg.target) != 1:
            raise ValueError("exactly one target column is supported")
        target = train[cfg.target[0]]
        nulls = np.flatnonzero(target.mask)
        if nulls.size:
            raise NullTarget(int(nulls[0]))

        self.continuous_cols = tuple(cfg.continuous_cols)
        self.categorical_cols = tuple(cfg.categorical_cols)
        self.target_col = cfg.target[0]
        self.task = task
        self.normalization = cfg.normalization
        self.loo_noise_std = cfg.loo_noise_std
        self.seed = seed
        self.target_dtype = target.dtype

        if task == "classification":
            self.target_map = {}
            for key in target.category_keys():
                self.target_map.setdefault(key, len(self.target_map))
        elif not target.is_numeric:
            raise NonNumericContinuous(target.name)

        for name in self.continuous_cols:
            col = train[name]
            if not col.is_numeric:
                raise NonNumericContinuous(name)
            present = col.values[~col.mask]
            if present.size == 0:
                mean, std, lo, hi = 0.0, 0.0, 0.0, 0.0
            else:
                mean, std = float(present.mean()), float(present.std())
                lo, hi = float(present.min()), float(present.max())
            self.impute[name] = mean
            self.cont_stats[name] = (lo, hi) if self.normalization == "minmax" else (mean, std)

        for name in self.categorical_cols:
            vocab: dict[str, int] = {}
            for key in train[name].category_keys():
                vocab.setdefault(key, len(vocab) + 1)
            self.vocab[name] = vocab

        if model_kind.uses_leave_one_out:
            y = self._target_values(train)
            columns = {}
            for name in self.categorical_cols:
                stats: dict[str, list] = {}
                for key, yi in zip(train[name].category_keys(), y):
                    entry = stats.setdefault(key, [0.0, 0])
                    entry[0] += float(yi)
                    entry[1] += 1
                columns[name] = stats
            self.loo_stats = {"global_mean": float(np.mean(y)), "columns": columns}

        self.fitted = True
        return self

    def _target_values(self, frame: TableFrame) -> np.ndarray:
        col = frame[self.target_col]
        nulls = np.flatnonzero(col.mask)
        if nulls.size:
            raise NullTarget(int(nulls[0]))
        if self.task == "classification":
            out = np.empty(len(col), dtype=np.int64)
            for i, key in enumerate(col.category_keys()):
                if key not in self.target_map:
                    raise UnseenTargetLabel(key)
                out[i] = self.target_map[key]
            return out
        return col.values.astype(np.float64)

    # -- serialisation -------------------------------------------------------

    def to_json(self) -> dict[str, Any]:
        if not self.fitted:
            raise NotFitted("pipeline state is not fitted")
        return {
            "vocab": self.vocab,
            "loo_stats": self.loo_stats,
            "cont_stats": {k: list(v) for k, v in self.cont_stats.items()},
            "target_map": self.target_map,
            "impute": self.impute,
            "continuous_cols": list(self.continuous_cols),
            "categorical_cols": list(self.categorical_cols),
            "target_col": self.target_col,
            "target_dtype": self.target_dtype,
            "task": self.task,
            "normalization": self.normalization,
            "loo_noise_std": self.loo_noise_std,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> PipelineState:
        return cls(
            continuous_cols=tuple(obj["continuous_cols"]),
            categorical_cols=tuple(obj["categorical_cols"]),
            target_col=obj["target_col"],
            task=obj["task"],
            normalization=obj["normalization"],
            vocab={k: dict(v) for k, v in obj["vocab"].items()},
            loo_stats=obj["loo_stats"],
            cont_stats={k: (float(v[0]), float(v[1])) for k, v in obj["cont_stats"].items()},
            impute={k: float(v) for k, v in obj["impute"].items()},
            target_map=obj["target_map"],
            target_dtype=obj["target_dtype"],
            loo_noise_std=float(obj["loo_noise_std"]),
            seed=int(obj["seed"]),
            fitted=True,
        )


def fit_pipeline(train: TableFrame, cfg: DataConfig, model_kind: ModelKind, seed: int, task: str) -> PipelineState:
    """Learn vocabularies, scaling and target codes from training rows only."""
    return PipelineState().fit(train, cfg, model_kind, seed, task)


# -- encoding --------------------------------------------------------------


@dataclass
class EncodedDataset:
    continuous: np.ndarray  # [rows, n_cont] float64
    categorical: np.ndarray  # [rows, n_cat] int64, 0 = unknown
    loo: np.ndarray | None = None  # [rows, n_cat] float64
    target: np.ndarray | None = None  # int64 class indices or float64

    def __post_init__(self):
        rows = {len(self.continuous), len(self.categorical)}
        if self.loo is not None:
            rows.add(len(self.loo))
        if self.target is not None:
            rows.add(len(self.target))
        if len(rows) != 1:
            raise ValueError(f"encoded parts disagree on row count: {sorted(rows)}")

    def __len__(self) -> int:
        return len(self.continuous)

    def take(self, indices) -> EncodedDataset:
        return EncodedDataset(
            self.continuous[indices],
            self.categorical[indices],
            None if self.loo is None else self.loo[indices],
            None if self.target is None else self.target[indices],
        )


Batch = EncodedDataset


def encode_leave_one_out(
    keys: Sequence[str],
    targets: np.ndarray | None,
    stats: Mapping[str, Sequence[float]],
    global_mean: float,
    mode: str,
) -> np.ndarray:
    """Leave-one-out target means for one categorical column.

    ``mode="train"``: row i of category c gets ``(sum_c - y_i) / (count_c - 1)``,
    or the global mean when c occurs once. ``mode="inference"``: the full
    category mean ``sum_c / count_c``; unseen categories get the global mean.
    """
    out = np.empty(len(keys), dtype=np.float64)
    if mode == "train":
        if targets is None:
            raise ValueError("train-mode leave-one-out encoding needs target values")
        for i, (key, yi) in enumerate(zip(keys, targets)):
            total, count = stats.get(key, (0.0, 0))
            out[i] = (total - float(yi)) / (count - 1) if count > 1 else global_mean
    elif mode == "inference":
        for i, key in enumerate(keys):
            total, count = stats.get(key, (0.0, 0))
            out[i] = total / count if count > 0 else global_mean
    else:
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
    return out


def transform(
    frame: TableFrame,
    state: PipelineState,
    mode: str = "inference",
    require_target: bool = False,
) -> EncodedDataset:
    """Encode a frame with a fitted state.

    The target is encoded when its column is present (and must be when
    ``mode == "train"`` or ``require_target``).
    """
    if not state.fitted:
        raise NotFitted("pipeline state is not fitted")
    rows = frame.row_count

    cont = np.zeros((rows, len(state.continuous_cols)))
    for j, name in enumerate(state.continuous_cols):
        col = frame[name]
        if not col.is_numeric:
            raise NonNumericContinuous(name)
        x = np.where(col.mask, state.impute[name], col.values)
        a, b = state.cont_stats[name]
        if state.normalization == "standard":
            cont[:, j] = (x - a) / b if b > 0 else 0.0
        elif state.normalization == "minmax":
            cont[:, j] = (x - a) / (b - a) if b > a else 0.0
        else:
            cont[:, j] = x

    cat = np.zeros((rows, len(state.categorical_cols)), dtype=np.int64)
    keys_by_col = {}
    for j, name in enumerate(state.categorical_cols):
        keys = frame[name].category_keys()
        keys_by_col[name] = keys
        vocab = state.vocab[name]
        cat[:, j] = [vocab.get(k, UNKNOWN_INDEX) for k in keys]

    target = None
    if state.target_col in frame:
        target = state._target_values(frame)
    elif mode == "train" or require_target:
        raise MissingColumn(state.target_col)

    loo = None
    if state.uses_leave_one_out:
        loo = np.zeros((rows, len(state.categorical_cols)))
        stats = state.loo_stats
        for j, name in enumerate(state.categorical_cols):
            loo[:, j] = encode_leave_one_out(
                keys_by_col[name], target, stats["columns"][name], stats["global_mean"], mode
            )
        if mode == "train" and state.loo_noise_std > 0:
            rng = stream_rng(state.seed, SPLIT_STREAM, 1)
            loo *= rng.normal(1.0, state.loo_noise_std, size=loo.shape)
    return EncodedDataset(cont, cat, loo, target)


def batches(
    ds: EncodedDataset,
    batch_size: int,
    shuffle: bool = False,
    seed: int = 0,
    drop_degenerate: bool = False,
    epoch: int = 0,
) -> Iterator[Batch]:
    """Consecutive slices of ``ds``.

    With ``shuffle`` the row order is a permutation drawn from the shuffle
    stream of ``seed`` for the given ``epoch``. The last partial batch is
    kept, unless it has a single row and ``drop_degenerate`` is set (batch
    norm cannot train on one row).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    order = stream_rng(seed, SHUFFLE_STREAM, epoch).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if drop_degenerate and len(idx) == 1 and n > 1:
            return
        yield ds.take(idx)
