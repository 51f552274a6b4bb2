"""Checkpoint container: a numpy ``.npz`` archive plus a JSON header entry.

Arrays are stored as float64 verbatim, so save/load round-trips bit-exactly.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .backbone import SplitModel
from .errors import SchemaError
from .mathcore import DenseParams
from .semgroup import CommModules

__all__ = ["FORMAT_VERSION", "save_backbone", "load_backbone", "save_comm", "load_comm"]

FORMAT_VERSION = 1
_META = "__meta__"


def _write(path, kind: str, arrays: dict, meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": "collabinfer-checkpoint", "version": FORMAT_VERSION, "kind": kind,
              "shapes": {k: list(np.shape(v)) for k, v in arrays.items()}, **meta}
    payload = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in arrays.items()}
    payload[_META] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def _read(path, kind: str) -> tuple[dict, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        if _META not in data:
            raise SchemaError(f"{path}: not a checkpoint (missing header)")
        header = json.loads(data[_META].tobytes().decode())
        arrays = {k: data[k].copy() for k in data.files if k != _META}
    if header.get("version") != FORMAT_VERSION or header.get("kind") != kind:
        raise SchemaError(
            f"{path}: expected {kind} v{FORMAT_VERSION}, got "
            f"{header.get('kind')} v{header.get('version')}"
        )
    for k, shape in header["shapes"].items():
        if k not in arrays or list(arrays[k].shape) != shape:
            raise SchemaError(f"{path}: array {k!r} missing or mis-shaped")
    return header, arrays


def _dense(arrays: dict, prefix: str) -> DenseParams:
    n = sum(1 for k in arrays if k.startswith(prefix) and k.endswith(".weight"))
    return DenseParams([arrays[f"{prefix}{l}.weight"] for l in range(n)],
                       [arrays[f"{prefix}{l}.bias"] for l in range(n)])


def save_backbone(model: SplitModel, path) -> Path:
    return _write(path, "backbone", model.params.named_arrays("layer."),
                  {"n_classes": model.n_classes, "seed": model.seed, "dims": model.dims})


def load_backbone(path, freeze: bool = True) -> SplitModel:
    header, arrays = _read(path, "backbone")
    model = SplitModel(_dense(arrays, "layer."), header["n_classes"], header["seed"])
    if model.dims != header["dims"]:
        raise SchemaError(f"{path}: split table does not match layer shapes")
    return model.freeze() if freeze else model


def save_comm(comm: CommModules, path, **meta) -> Path:
    return _write(path, "comm", comm.named_arrays(), meta)


def load_comm(path) -> tuple[CommModules, dict]:
    header, arrays = _read(path, "comm")
    comm = CommModules(_dense(arrays, "query."), _dense(arrays, "key."), arrays["wa"])
    return comm, header
