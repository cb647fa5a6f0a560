"""Checkpoint directories.

Layout::

    config.yaml     full config bundle
    pipeline.json   fitted preprocessing state
    manifest.json   {"format_version": 1, "tensors": [{name, shape, offset, count}, ...]}
    weights.bin     little-endian float64 values, parameters then buffers

Byte ranges in the manifest tile ``weights.bin`` exactly; the loader checks
that before touching any values.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tabular.config import ConfigBundle, parse_config_text, validate
from tabular.data import PipelineState
from tabular.errors import BadCheckpoint, ConfigError, IoError, VersionMismatch

FORMAT_VERSION = 1
CHECKPOINT_FILES = ("config.yaml", "pipeline.json", "manifest.json", "weights.bin")
_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    bundle: ConfigBundle
    pipeline: PipelineState
    arrays: dict[str, np.ndarray]


def _pack(arrays: list[tuple[str, np.ndarray]]) -> tuple[dict, bytes]:
    tensors, chunks, offset = [], [], 0
    for name, value in arrays:
        data = np.ascontiguousarray(value, dtype=_DTYPE)
        tensors.append({"name": name, "shape": list(data.shape), "offset": offset, "count": int(data.size)})
        chunks.append(data.tobytes())
        offset += data.nbytes
    return {"format_version": FORMAT_VERSION, "tensors": tensors}, b"".join(chunks)


def _write_files(target: Path, bundle: ConfigBundle, pipeline: PipelineState, arrays) -> None:
    manifest, blob = _pack(arrays)
    (target / "config.yaml").write_text(bundle.to_yaml(), encoding="utf-8")
    (target / "pipeline.json").write_text(json.dumps(pipeline.to_json(), indent=1), encoding="utf-8")
    (target / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    with open(target / "weights.bin", "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())


def save_checkpoint(
    directory: str | os.PathLike,
    bundle: ConfigBundle,
    pipeline: PipelineState,
    arrays: list[tuple[str, np.ndarray]],
) -> Path:
    """Write a checkpoint, replacing any existing one at ``directory`` atomically.

    Files go to a temporary sibling directory first, which is then renamed
    into place; a failure part-way leaves the previous checkpoint intact.
    """
    directory = Path(directory)
    staging = None
    try:
        directory.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=f".{directory.name}.tmp-", dir=directory.parent))
        _write_files(staging, bundle, pipeline, arrays)
        if directory.exists():
            retired = Path(tempfile.mkdtemp(prefix=f".{directory.name}.old-", dir=directory.parent))
            os.replace(directory, retired / "ckpt")
            os.replace(staging, directory)
            shutil.rmtree(retired, ignore_errors=True)
        else:
            os.replace(staging, directory)
        staging = None
    except OSError as exc:
        raise IoError(getattr(exc, "filename", None) or directory, exc.strerror or str(exc)) from exc
    finally:
        if staging is not None:
            shutil.rmtree(staging, ignore_errors=True)
    return directory


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise BadCheckpoint(f"missing {path.name}") from exc
    except OSError as exc:
        raise IoError(path, exc.strerror or str(exc)) from exc


def read_manifest(directory: str | os.PathLike) -> dict:
    directory = Path(directory)
    try:
        manifest = json.loads(_read_text(directory / "manifest.json"))
    except json.JSONDecodeError as exc:
        raise BadCheckpoint(f"manifest.json is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or "format_version" not in manifest:
        raise BadCheckpoint("manifest.json has no format_version")
    if manifest["format_version"] != FORMAT_VERSION:
        raise VersionMismatch(manifest["format_version"], FORMAT_VERSION)
    if not isinstance(manifest.get("tensors"), list):
        raise BadCheckpoint("manifest.json has no tensor list")
    return manifest


def read_weights(directory: str | os.PathLike, manifest: dict) -> dict[str, np.ndarray]:
    directory = Path(directory)
    try:
        blob = (directory / "weights.bin").read_bytes()
    except FileNotFoundError as exc:
        raise BadCheckpoint("missing weights.bin") from exc
    except OSError as exc:
        raise IoError(directory / "weights.bin", exc.strerror or str(exc)) from exc

    arrays, expected_offset = {}, 0
    for entry in manifest["tensors"]:
        try:
            name, shape = str(entry["name"]), tuple(int(s) for s in entry["shape"])
            offset, count = int(entry["offset"]), int(entry["count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BadCheckpoint(f"malformed tensor descriptor {entry!r}") from exc
        if count != int(np.prod(shape, dtype=np.int64)):
            raise BadCheckpoint(f"tensor {name!r}: count {count} does not match shape {list(shape)}")
        if offset != expected_offset:
            raise BadCheckpoint(f"byte range of {name!r} starts at {offset}, expected {expected_offset}")
        end = offset + count * _DTYPE.itemsize
        if end > len(blob):
            raise BadCheckpoint(f"byte range [{offset}, {end}) of {name!r} exceeds weights.bin size {len(blob)}")
        if name in arrays:
            raise BadCheckpoint(f"tensor {name!r} listed twice")
        arrays[name] = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=offset).reshape(shape).astype(np.float64)
        expected_offset = end
    if expected_offset != len(blob):
        raise BadCheckpoint(f"byte ranges cover {expected_offset} bytes but weights.bin has {len(blob)}")
    return arrays


def load_checkpoint(directory: str | os.PathLike) -> Checkpoint:
    directory = Path(directory)
    if not directory.is_dir():
        raise BadCheckpoint(f"{directory} is not a checkpoint directory")
    manifest = read_manifest(directory)
    arrays = read_weights(directory, manifest)
    try:
        bundle = validate(parse_config_text(_read_text(directory / "config.yaml")))
    except ConfigError as exc:
        raise BadCheckpoint(f"config.yaml: {exc}") from exc
    try:
        pipeline = PipelineState.from_json(json.loads(_read_text(directory / "pipeline.json")))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise BadCheckpoint(f"pipeline.json: {exc}") from exc
    return Checkpoint(bundle, pipeline, arrays)
