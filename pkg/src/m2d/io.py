"""File formats: feature tensors + manifest, label lists, per-step metrics.

Feature container (little-endian)::

    magic    8 bytes  b"M2DFEAT\\0"
    dtype    u8 length + ASCII numpy dtype string ("<f4")
    ndim     u8, then ndim x u64 shape
    payload  row-major bytes

The sidecar ``<file>.manifest`` has one tab-separated line per clip:
``clip_id<TAB>row_offset<TAB>n_rows``.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write
from .errors import DataError

FEATURE_MAGIC = b"M2DFEAT\0"
METRIC_FIELDS = ("step", "loss_m2d", "loss_off", "loss_total", "tau", "seconds")


def encode_features(array: np.ndarray) -> bytes:
    arr = np.require(array, requirements="C")
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    dtype_b = arr.dtype.str.encode()
    header = FEATURE_MAGIC + struct.pack("<B", len(dtype_b)) + dtype_b
    header += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def decode_features(blob: bytes) -> np.ndarray:
    if blob[:8] != FEATURE_MAGIC:
        raise DataError("not an M2D feature file (bad magic)")
    try:
        pos = 8
        n = blob[pos]
        dtype = np.dtype(blob[pos + 1:pos + 1 + n].decode())
        pos += 1 + n
        ndim = blob[pos]
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos + 1)
    except (IndexError, struct.error, TypeError, ValueError, UnicodeDecodeError):
        raise DataError("feature file header is truncated or malformed") from None
    pos += 1 + 8 * ndim
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) - pos != expected:
        raise DataError(f"feature payload has {len(blob) - pos} bytes, header implies {expected}")
    return np.frombuffer(blob, dtype=dtype, offset=pos).reshape(shape).copy()


def write_features(path, array: np.ndarray, manifest):
    """Write the tensor and its ``(clip_id, row_offset, n_rows)`` manifest."""
    path = Path(path)
    atomic_write(path, encode_features(array))
    lines = "".join(f"{cid}\t{off}\t{n}\n" for cid, off, n in manifest)
    atomic_write(path.with_name(path.name + ".manifest"), lines.encode())


def read_features(path):
    path = Path(path)
    array = decode_features(path.read_bytes())
    manifest = []
    for line in path.with_name(path.name + ".manifest").read_text().splitlines():
        cid, off, n = line.split("\t")
        manifest.append((cid, int(off), int(n)))
    return array, manifest


def read_labels(path) -> dict:
    """``clip_id<TAB>i,j,k`` per line -> {clip_id: [i, j, k]}."""
    labels = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            cid, classes = line.split("\t")
            labels[cid] = [int(c) for c in classes.split(",") if c.strip()]
        except ValueError:
            raise DataError(f"{path}:{lineno}: expected 'clip_id<TAB>comma-separated class indices'") from None
    return labels


def write_labels(path, labels: dict):
    text = "".join(f"{cid}\t{','.join(str(c) for c in classes)}\n" for cid, classes in labels.items())
    atomic_write(path, text.encode())


class MetricsWriter:
    """Append-only JSON-lines metrics, one record per step with a fixed field order."""

    def __init__(self, path, resume_step: int | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if resume_step is None:
            self.path.write_text("")
        else:
            # drop records the checkpoint does not cover
            kept = [line for line in read_metrics_lines(self.path) if json.loads(line)["step"] < resume_step]
            self.path.write_text("".join(line + "\n" for line in kept))

    def write(self, report, seconds: float):
        record = dict(zip(METRIC_FIELDS, (report.step, report.loss_m2d, report.loss_off, report.loss_total,
                                          report.tau_used, seconds)))
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record) + "\n")


def read_metrics_lines(path):
    path = Path(path)
    if not path.exists():
        return []
    return [line for line in path.read_text().splitlines() if line.strip()]


def read_metrics(path):
    return [json.loads(line) for line in read_metrics_lines(path)]
