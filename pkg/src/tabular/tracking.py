"""File-based experiment tracking.

Each run gets a directory ``log_dir/project_name/<run_name>`` holding a
config snapshot (``config.yaml``), run metadata (``meta.json``) and an
append-only ``metrics.jsonl`` with one record per line.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import IO

import numpy as np

from tabular.autodiff import ParamStore
from tabular.config import ConfigBundle, ExperimentConfig
from tabular.errors import IoError

SPLITS = ("train", "val", "test")
RECORD_KEYS = ("run_id", "epoch", "step", "split", "name", "value", "wall_time")


@dataclass(frozen=True)
class MetricsRecord:
    run_id: str
    epoch: int
    step: int
    split: str
    name: str
    value: float
    wall_time: float = field(default_factory=time.time)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.epoch < 0:
            raise ValueError(f"epoch must be >= 0, got {self.epoch}")
        if not math.isfinite(self.value):
            raise ValueError(f"metric {self.name!r} has non-finite value {self.value!r}")


def run_id_for(bundle: ConfigBundle) -> str:
    """Stable identifier derived from the project name and the full config.

    It depends only on the configuration (seed included) and not on where
    logs or checkpoints go, so repeated runs of the same experiment log
    identical records apart from ``wall_time``.
    """
    raw = bundle.to_raw()
    raw["experiment"].pop("log_dir")
    raw["trainer"].pop("checkpoint_dir")
    digest = hashlib.sha256(json.dumps(raw, sort_keys=True).encode("utf-8")).hexdigest()[:12]
    return f"{bundle.experiment.project_name}-{digest}"


@dataclass
class RunHandle:
    path: Path
    run_id: str
    project_name: str
    run_name: str
    seed: int
    config: ConfigBundle
    sink: IO[str] | None = None
    records_written: int = 0

    @property
    def metrics_path(self) -> Path:
        return self.path / "metrics.jsonl"

    @property
    def closed(self) -> bool:
        return self.sink is None

    def log(self, epoch: int, step: int, split: str, name: str, value: float) -> MetricsRecord:
        record = MetricsRecord(self.run_id, epoch, step, split, name, float(value))
        log_metric(self, record)
        return record

    def flush(self) -> None:
        if self.sink is not None:
            try:
                self.sink.flush()
            except OSError as exc:
                raise IoError(self.metrics_path, str(exc)) from exc

    def close(self) -> None:
        if self.sink is not None:
            self.flush()
            self.sink.close()
            self.sink = None

    def __enter__(self) -> RunHandle:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _timestamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")


def _claim_directory(parent: Path, name: str) -> Path:
    # mkdir without exist_ok is the atomic claim; on collision try name-1, name-2, ...
    candidate, n = parent / name, 0
    while True:
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            n += 1
            candidate = parent / f"{name}-{n}"


def start_run(experiment: ExperimentConfig, bundle: ConfigBundle) -> RunHandle:
    """Create the run directory, write the snapshots and open ``metrics.jsonl``."""
    parent = Path(experiment.log_dir) / experiment.project_name
    run_name = experiment.run_name or _timestamp()
    try:
        parent.mkdir(parents=True, exist_ok=True)
        path = _claim_directory(parent, run_name)
        handle = RunHandle(
            path=path,
            run_id=run_id_for(bundle),
            project_name=experiment.project_name,
            run_name=path.name,
            seed=bundle.trainer.seed,
            config=bundle,
        )
        (path / "config.yaml").write_text(bundle.to_yaml(), encoding="utf-8")
        meta = {
            "run_id": handle.run_id,
            "project_name": handle.project_name,
            "run_name": handle.run_name,
            "seed": handle.seed,
            "start_time": datetime.now(timezone.utc).isoformat(),
        }
        (path / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
        handle.sink = open(handle.metrics_path, "a", encoding="utf-8")
    except OSError as exc:
        raise IoError(getattr(exc, "filename", None) or parent, exc.strerror or str(exc)) from exc
    return handle


def log_metric(handle: RunHandle, record: MetricsRecord) -> None:
    """Append one record. Flushing happens at epoch boundaries via ``handle.flush()``."""
    if handle.sink is None:
        raise IoError(handle.metrics_path, "run is closed")
    if not math.isfinite(record.value):
        raise ValueError(f"metric {record.name!r} has non-finite value {record.value!r}")
    line = json.dumps(asdict(record))
    try:
        handle.sink.write(line + "\n")
    except OSError as exc:
        raise IoError(handle.metrics_path, str(exc)) from exc
    handle.records_written += 1


def log_gradient_norms(handle: RunHandle, params: ParamStore, epoch: int, step: int = 0, enabled: bool = True) -> None:
    """One ``grad_norm/<param>`` record per parameter; missing grads count as zero."""
    if not enabled:
        return
    for name, p in params.items():
        norm = 0.0 if p.grad is None else float(np.sqrt(np.sum(p.grad * p.grad)))
        handle.log(epoch, step, "train", f"grad_norm/{name}", norm)


def read_metrics(path: str | os.PathLike) -> list[dict]:
    """Parse a ``metrics.jsonl`` file (or a run directory containing one)."""
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.jsonl"
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
