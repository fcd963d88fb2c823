"""Binary checkpoints.

Layout, all little-endian::

    b"VXCK"  u32 version  u32 epoch  u32 len  config JSON (utf-8, len bytes)
    u32 record count
    repeated:  u32 len  name (utf-8)  u32 rank  u64 dims[rank]  f64 data

Parameters are stored as ``param/<name>``, Adam moments as ``adam.m/<name>``
and ``adam.v/<name>``, the Adam step counter as the scalar ``adam.step`` and
frozen buffers as ``buffer/<name>``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .optim import Adam

MAGIC = b"VXCK"
VERSION = 1


@dataclass
class Checkpoint:
    epoch: int
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + "/")}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    config = json.dumps(ckpt.config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<III", VERSION, ckpt.epoch, len(config)), config,
             struct.pack("<I", len(ckpt.tensors))]
    for name, array in ckpt.tensors.items():
        raw_name = name.encode()
        array = np.asarray(array, dtype="<f8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<I{array.ndim}Q", array.ndim, *array.shape))
        parts.append(np.ascontiguousarray(array).tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise ContractError(f"not a checkpoint (magic {raw[:4]!r})")
    version, epoch, n = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    offset = 16
    config = json.loads(raw[offset:offset + n].decode())
    offset += n
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, offset)
        name = raw[offset + 4:offset + 4 + n].decode()
        offset += 4 + n
        (rank,) = struct.unpack_from("<I", raw, offset)
        dims = struct.unpack_from(f"<{rank}Q", raw, offset + 4)
        offset += 4 + 8 * rank
        size = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(raw, "<f8", size, offset).reshape(dims).astype(np.float64)
        offset += 8 * size
    if offset != len(raw):
        raise ContractError(f"{len(raw) - offset} trailing bytes after checkpoint records")
    return Checkpoint(epoch, config, tensors)


def save(path, ckpt: Checkpoint) -> None:
    """Write atomically so an interrupted save never leaves a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def capture(model, epoch: int, config: dict, optimizer: Adam | None = None,
            buffers: dict[str, np.ndarray] | None = None) -> Checkpoint:
    tensors = {f"param/{name}": p.data.copy() for name, p in model.named_parameters()}
    if optimizer is not None:
        names = [name for name, _ in model.named_parameters()]
        for name, m, v in zip(names, optimizer.m, optimizer.v):
            tensors[f"adam.m/{name}"] = m.copy()
            tensors[f"adam.v/{name}"] = v.copy()
        tensors["adam.step"] = np.array(float(optimizer.step_count))
    for name, value in (buffers or {}).items():
        tensors[f"buffer/{name}"] = np.asarray(value, dtype=np.float64).copy()
    return Checkpoint(epoch, config, tensors)


def restore(ckpt: Checkpoint, model, optimizer: Adam | None = None) -> None:
    params = ckpt.section("param")
    named = dict(model.named_parameters())
    if set(params) != set(named):
        missing, extra = sorted(set(named) - set(params)), sorted(set(params) - set(named))
        raise ContractError(f"checkpoint does not match model (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, p in named.items():
        if params[name].shape != p.shape:
            raise ContractError(f"{name}: checkpoint shape {params[name].shape} != model shape {p.shape}")
        p.data[...] = params[name]
    if optimizer is not None and "adam.step" in ckpt.tensors:
        m, v = ckpt.section("adam.m"), ckpt.section("adam.v")
        for i, name in enumerate(named):
            optimizer.m[i][...] = m[name]
            optimizer.v[i][...] = v[name]
        optimizer.step_count = int(ckpt.tensors["adam.step"])
