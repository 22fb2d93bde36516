"""Checkpoints: a JSON manifest plus one little-endian float32 blob.

``<stem>.json`` lists every array with its shape and byte offset into
``<stem>.bin``.  Saving a float32 model and loading it back is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .model import ModelConfig, ViT, parameter_shapes
from .numerics import Tensor

FORMAT = "cbvit-checkpoint"
VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path.with_suffix(".json"), path.with_suffix(".bin")


def save_checkpoint(model: ViT, path, extra: dict | None = None) -> Path:
    """Write ``<path>.json`` and ``<path>.bin``; returns the manifest path."""
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    arrays = dict((name, p.data) for name, p in model.params.items())
    arrays["buffers.pixel_mean"] = model.pixel_mean
    arrays["buffers.pixel_std"] = model.pixel_std
    entries, offset = [], 0
    with open(blob_path, "wb") as fh:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": "float32",
        "byte_order": "little",
        "blob": blob_path.name,
        "blob_sha256": hashlib.sha256(blob_path.read_bytes()).hexdigest(),
        "config": model.config.to_dict(),
        "arrays": entries,
    }
    if extra:
        manifest["extra"] = extra
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def read_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    manifest_path, _ = _paths(path)
    if not manifest_path.exists():
        raise CheckpointError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{manifest_path} is not a {FORMAT} manifest")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    arrays = {}
    for e in manifest["arrays"]:
        n = math.prod(e["shape"]) * _DTYPE.itemsize
        if e["nbytes"] != n or e["offset"] + n > len(blob):
            raise CheckpointError(f"array {e['name']} has an inconsistent size or offset")
        arr = np.frombuffer(blob, dtype=_DTYPE, count=n // _DTYPE.itemsize, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return manifest, arrays


def load_checkpoint(path, config: ModelConfig | None = None, dtype=np.float32) -> ViT:
    """Rebuild a model; with ``config`` given, mismatching arrays are listed in the error."""
    manifest, arrays = read_arrays(path)
    config = config if config is not None else ModelConfig.from_dict(manifest["config"])
    expected = parameter_shapes(config)
    problems = []
    for name, shape in expected.items():
        if name not in arrays:
            problems.append(f"{name}: missing")
        elif tuple(arrays[name].shape) != shape:
            problems.append(f"{name}: shape {tuple(arrays[name].shape)} != expected {shape}")
    for name in arrays:
        if name not in expected and not name.startswith("buffers."):
            problems.append(f"{name}: unexpected")
    if problems:
        raise CheckpointError("checkpoint does not match config:\n  " + "\n  ".join(problems))
    params = {n: Tensor(arrays[n].astype(dtype), requires_grad=True) for n in expected}
    return ViT(
        config,
        dtype=dtype,
        params=params,
        pixel_mean=arrays.get("buffers.pixel_mean"),
        pixel_std=arrays.get("buffers.pixel_std"),
    )
