"""Canonical model checkpoints.

Layout::

    ADAPT-CHECKPOINT\\n
    <one line of JSON metadata, keys sorted, no whitespace>\\n
    <parameter vector as little-endian float64>

The metadata carries the format version, stage marker, config hash, seed,
metric snapshot, model config, segment layout, prototype classes and push
provenance. Serialization is canonical, so load-then-save reproduces the
input bytes exactly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DependencyError, FormatError
from .model import ModelConfig, ModelState, param_layout
from .numerics import ParamVector

MAGIC = b"ADAPT-CHECKPOINT\n"
FORMAT_VERSION = 1


def atomic_write(path, data: bytes | str) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        data = data.encode("utf-8")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _clean(value):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None, tuples to lists."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def canonical_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass
class Checkpoint:
    model: ModelState
    config_hash: str
    seed: int
    metrics: dict = field(default_factory=dict)

    @property
    def stage(self) -> int:
        return self.model.stage

    def meta(self) -> dict:
        m = self.model
        return {
            "format_version": FORMAT_VERSION,
            "stage": m.stage,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "metrics": self.metrics,
            "model_config": m.config.to_dict(),
            "layout": [[name, list(shape)] for name, shape in m.params.layout],
            "class_of": [int(c) for c in m.class_of],
            "provenance": [None if p is None else list(p) for p in m.provenance],
        }

    def to_bytes(self) -> bytes:
        values = np.ascontiguousarray(self.model.params.values, dtype="<f8")
        return MAGIC + canonical_json(self.meta()).encode("utf-8") + b"\n" + values.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> Checkpoint:
        if not buf.startswith(MAGIC):
            raise FormatError("not a checkpoint (bad magic)", 0)
        end = buf.find(b"\n", len(MAGIC))
        if end < 0:
            raise FormatError("checkpoint metadata line is truncated", len(buf))
        try:
            meta = json.loads(buf[len(MAGIC) : end].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"checkpoint metadata is not valid JSON: {exc}", len(MAGIC)) from None
        if meta.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint format-version {meta.get('format_version')!r}", len(MAGIC))
        try:
            cfg = ModelConfig(**meta["model_config"])
            layout = tuple((name, tuple(shape)) for name, shape in meta["layout"])
            class_of = np.array(meta["class_of"], dtype=np.int64)
            provenance = [None if p is None else tuple(p) for p in meta["provenance"]]
            stage, config_hash, seed = int(meta["stage"]), str(meta["config_hash"]), int(meta["seed"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"checkpoint metadata is incomplete: {exc}", len(MAGIC)) from None
        if layout != param_layout(cfg):
            raise FormatError("checkpoint layout does not match its model config", len(MAGIC))
        start = end + 1
        n = sum(int(np.prod(s, dtype=np.int64)) for _, s in layout)
        body = buf[start:]
        if len(body) < 8 * n:
            raise FormatError(f"parameter block is truncated: {len(body)} of {8 * n} bytes", len(buf))
        if len(body) > 8 * n:
            raise FormatError("unexpected bytes after the parameter block", start + 8 * n)
        values = np.frombuffer(body, dtype="<f8").astype(np.float64)
        model = ModelState(cfg, ParamVector(layout, values), class_of, provenance, stage)
        return cls(model, config_hash, seed, meta.get("metrics") or {})


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"checkpoint {path} does not exist")
    return Checkpoint.from_bytes(path.read_bytes())
