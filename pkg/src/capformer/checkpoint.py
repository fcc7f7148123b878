"""Self-describing JSON checkpoints.

Tensors are stored as base64 of their little-endian float64 bytes in
row-major order, so a save/load round trip is bit-exact and identical
parameters always produce byte-identical files.
"""

from __future__ import annotations

import base64
import json
import os

import numpy as np

from .datapipe import NormStats
from .errors import CheckpointError, ConfigError, ShapeError
from .model import ModelConfig, ModelParams

FORMAT_VERSION = 1
_DTYPE = "<f8"


def _encode(arr: np.ndarray) -> dict:
    payload = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes(order="C")
    return {"shape": list(arr.shape), "dtype": "float64-le",
            "data": base64.b64encode(payload).decode("ascii")}


def _decode(name: str, entry: dict) -> np.ndarray:
    if entry.get("dtype") != "float64-le":
        raise CheckpointError(f"tensor {name}: unsupported dtype {entry.get('dtype')!r}")
    raw = base64.b64decode(entry["data"])
    arr = np.frombuffer(raw, dtype=_DTYPE).astype(np.float64)
    shape = tuple(entry["shape"])
    if arr.size != int(np.prod(shape)):
        raise CheckpointError(f"tensor {name}: payload size does not match shape {shape}")
    return arr.reshape(shape)


def dumps(params: ModelParams, norm_stats: NormStats | None = None,
          extra: dict | None = None) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "config": params.config.to_dict(),
        "norm_stats": norm_stats.to_dict() if norm_stats is not None else None,
        "tensors": [{"name": k, **_encode(v)} for k, v in params.tensors.items()],
        "extra": extra or {},
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def loads(text: str) -> tuple[ModelParams, NormStats | None, dict]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version!r} is not supported "
                              f"(expected {FORMAT_VERSION})")
    try:
        cfg = ModelConfig.from_dict(doc["config"])
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc}") from None
    tensors = {t["name"]: _decode(t["name"], t) for t in doc["tensors"]}
    params = ModelParams(cfg, tensors)
    try:
        params.audit()
    except ShapeError as exc:
        raise CheckpointError(f"checkpoint tensors do not match its config: {exc}") from None
    stats = NormStats.from_dict(doc["norm_stats"]) if doc.get("norm_stats") else None
    return params, stats, doc.get("extra", {})


def save_checkpoint(path, params: ModelParams, norm_stats: NormStats | None = None,
                    extra: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(params, norm_stats, extra))


def load_checkpoint(path) -> tuple[ModelParams, NormStats | None, dict]:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint {path} does not exist")
    with open(path, "r", encoding="utf-8") as fh:
        return loads(fh.read())
