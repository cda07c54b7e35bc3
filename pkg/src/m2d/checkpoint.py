"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic       8 bytes  b"M2DCKPT\\0"
    version     u32
    n_tensors   u32
    n_tensors x:
        name    u16 length + UTF-8 bytes
        dtype   u8 length + ASCII numpy dtype string (e.g. "<f4")
        ndim    u8, then ndim x u64 shape
        payload u64 byte length + row-major bytes
    metadata    u64 length + UTF-8 JSON (sorted keys)
    checksum    32 bytes, SHA-256 of everything above
"""

from dataclasses import dataclass, field
import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, CheckpointVersionError, CorruptCheckpointError

MAGIC = b"M2DCKPT\0"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.require(ckpt.tensors[name].detach().cpu().numpy(), requirements="C")
        name_b = name.encode()
        dtype_b = arr.dtype.str.encode()
        buf.write(struct.pack("<H", len(name_b)) + name_b)
        buf.write(struct.pack("<B", len(dtype_b)) + dtype_b)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = arr.tobytes()
        buf.write(struct.pack("<Q", len(payload)) + payload)
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(meta)) + meta)
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 8 + 32 or blob[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("not an M2D checkpoint (bad magic or truncated header)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError("checkpoint checksum mismatch (truncated or corrupted file)")
    view = memoryview(body)
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CorruptCheckpointError("checkpoint ends mid-record")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    def take_bytes(n):
        nonlocal pos
        if pos + n > len(view):
            raise CorruptCheckpointError("checkpoint ends mid-record")
        out = bytes(view[pos:pos + n])
        pos += n
        return out

    version, count = take("<II")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    tensors = {}
    for _ in range(count):
        name = take_bytes(take("<H")[0]).decode()
        dtype = np.dtype(take_bytes(take("<B")[0]).decode())
        ndim = take("<B")[0]
        shape = take(f"<{ndim}Q")
        payload = take_bytes(take("<Q")[0])
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
        tensors[name] = torch.from_numpy(arr)
    meta = json.loads(take_bytes(take("<Q")[0]).decode())
    if pos != len(view):
        raise CorruptCheckpointError("trailing bytes after checkpoint metadata")
    return Checkpoint(tensors, meta)


def write_checkpoint(path, ckpt: Checkpoint):
    atomic_write(path, encode_checkpoint(ckpt))


def read_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)


def _flatten_optimizer(optimizer, tensors: dict) -> dict:
    state = optimizer.state_dict()
    for idx, slots in state["state"].items():
        for key, value in slots.items():
            tensors[f"optimizer.state.{idx}.{key}"] = torch.as_tensor(value)
    return {"param_groups": state["param_groups"]}


def _unflatten_optimizer(tensors: dict, meta: dict) -> dict:
    state = {}
    for name, value in tensors.items():
        if name.startswith("optimizer.state."):
            idx, key = name[len("optimizer.state."):].split(".", 1)
            state.setdefault(int(idx), {})[key] = value.clone()
    return {"state": state, "param_groups": meta["param_groups"]}


def save_checkpoint(path, *, online, target, step: int, config: dict, optimizer=None, mapper=None,
                    extra: dict | None = None):
    """Snapshot the online/target (and optional mapper/optimizer) state plus the config."""
    tensors = {}
    for prefix, module in (("online", online), ("target", target), ("mapper", mapper)):
        if module is not None:
            for k, v in module.state_dict().items():
                tensors[f"{prefix}.{k}"] = v
    meta = {"format_version": FORMAT_VERSION, "step": int(step), "config": config, "extra": extra or {}}
    if optimizer is not None:
        meta["optimizer"] = _flatten_optimizer(optimizer, tensors)
    ckpt = Checkpoint(tensors, meta)
    write_checkpoint(path, ckpt)
    return ckpt


def module_state(ckpt: Checkpoint, prefix: str) -> dict:
    p = prefix + "."
    return {k[len(p):]: v for k, v in ckpt.tensors.items() if k.startswith(p)}


def restore(ckpt: Checkpoint, *, online=None, target=None, optimizer=None, mapper=None):
    """Load checkpoint state into already-built modules; shape mismatches raise CheckpointError."""
    try:
        for prefix, module in (("online", online), ("target", target), ("mapper", mapper)):
            if module is not None:
                module.load_state_dict(module_state(ckpt, prefix))
        if optimizer is not None:
            if "optimizer" not in ckpt.meta:
                raise CheckpointError("checkpoint has no optimizer state")
            optimizer.load_state_dict(_unflatten_optimizer(ckpt.tensors, ckpt.meta["optimizer"]))
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not fit the model: {exc}") from exc
    return ckpt.step
