"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"JRSVCKPT"
    version    u32
    cfg_hash   32 bytes sha256 of the canonical config JSON
    meta       u32 length + UTF-8 JSON (kind, config echo, vocab, step, rng state, extras)
    n_records  u32
    records    n x (u16 name length, name, u8 ndim, ndim x u64 shape, float64 payload)
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"JRSVCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(config: dict) -> bytes:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).digest()


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict
    kind: str = "model"
    step: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def save_ckpt(ckpt: Checkpoint, path) -> None:
    meta = {"kind": ckpt.kind, "config": ckpt.config, "step": int(ckpt.step),
            "rng_state": ckpt.rng_state, "extra": ckpt.extra}
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION), config_hash(ckpt.config),
              struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(ckpt.params))]
    for name, arr in ckpt.params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        chunks += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim),
                   struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


def load_ckpt(path, expected_config: dict | None = None) -> Checkpoint:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    stored_hash = take(32)
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    if config_hash(meta["config"]) != stored_hash:
        raise CheckpointError(f"{path}: corrupt checkpoint (config hash does not match header)")
    if expected_config is not None and config_hash(expected_config) != stored_hash:
        raise CheckpointError("config mismatch")
    (n,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(n):
        (nl,) = struct.unpack("<H", take(2))
        name = take(nl).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last record")
    return Checkpoint(params, meta["config"], meta["kind"], meta["step"], meta["rng_state"], meta["extra"])


def model_state(model) -> dict[str, np.ndarray]:
    return {name: p.value.copy() for name, p in model.named_parameters()}


def load_state(model, params: dict[str, np.ndarray]) -> None:
    """Copy arrays into ``model``; names and shapes must match exactly."""
    own = model.parameters()
    if set(own) != set(params):
        missing = sorted(set(own) - set(params))[:3]
        extra = sorted(set(params) - set(own))[:3]
        raise CheckpointError(f"config mismatch: missing {missing}, unexpected {extra}")
    for name, p in own.items():
        if p.shape != params[name].shape:
            raise CheckpointError(f"config mismatch: {name} has shape {params[name].shape}, model expects {p.shape}")
        p.value = params[name].copy()


def model_checkpoint(model, step: int = 0, rng_state: dict | None = None, **extra) -> Checkpoint:
    return Checkpoint(model_state(model), model.config.to_dict(), model.kind, step, rng_state, extra)


def separator_from_checkpoint(ckpt: Checkpoint):
    from .models import SeparatorConfig, SeparatorModel

    if ckpt.kind != "separator":
        raise CheckpointError(f"expected a separator checkpoint, got {ckpt.kind!r}")
    model = SeparatorModel(SeparatorConfig.from_dict(ckpt.config))
    load_state(model, ckpt.params)
    return model


def asr_from_checkpoint(ckpt: Checkpoint):
    from .models import AsrConfig, AsrModel

    if ckpt.kind != "asr":
        raise CheckpointError(f"expected an asr checkpoint, got {ckpt.kind!r}")
    model = AsrModel(AsrConfig.from_dict(ckpt.config))
    load_state(model, {k: v for k, v in ckpt.params.items() if not k.startswith("separator/")})
    return model
