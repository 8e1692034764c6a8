"""Single-file checkpoint archive.

Layout (little-endian)::

    b"RCKPT1\\0\\0"
    uint32 header length, then UTF-8 JSON {"stage", "config", "state"}
    uint32 tensor count, then per tensor:
        uint16 name length, UTF-8 name, uint8 ndim, ndim x uint32 dims,
        float32 payload (C order)

Tensors are written in sorted-name order so identical inputs give
identical bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RCKPT1\x00\x00"
STAGES = ("clip", "synth")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    config: dict
    tensors: dict[str, np.ndarray]
    state: dict = field(default_factory=dict)


def _to_numpy(t) -> np.ndarray:
    if hasattr(t, "detach"):
        t = t.detach().cpu().numpy()
    return np.asarray(t, dtype="<f4", order="C")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    if ckpt.stage not in STAGES:
        raise CheckpointError(f"unknown stage {ckpt.stage!r}")
    header = json.dumps({"stage": ckpt.stage, "config": ckpt.config, "state": ckpt.state},
                        sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(header)), header,
             struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = _to_numpy(ckpt.tensors[name])
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<HB", len(raw_name), arr.ndim) + raw_name)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    tmp = Path(path).with_suffix(Path(path).suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    pos = 8
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", raw, pos)
        pos += 3
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        dims = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(raw, "<f4", n, pos).reshape(dims).copy()
        pos += 4 * n
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return Checkpoint(header["stage"], header["config"], tensors, header.get("state", {}))


def module_tensors(module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: _to_numpy(v) for k, v in module.state_dict().items()}


def load_module_tensors(module, tensors: dict, prefix: str = "") -> None:
    import torch

    own = module.state_dict()
    missing = [k for k in own if prefix + k not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {missing[:5]}")
    module.load_state_dict(
        {k: torch.as_tensor(tensors[prefix + k]).to(v.dtype) for k, v in own.items()}
    )
