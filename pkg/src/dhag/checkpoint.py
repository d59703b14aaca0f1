"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DHAGCKPT"                     magic
    u32 format_version
    u32 n                           length of the metadata blob
    n bytes                         UTF-8 JSON: architecture plus free-form metadata
    u32 count                       number of named tensors
    per tensor:
        u16 len, name (UTF-8)
        u8 ndim, ndim x u64 dims
        prod(dims) x f64 values
    u32 crc32 of every preceding byte
"""

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .core import DhagModel
from .exceptions import CheckpointError

MAGIC = b"DHAGCKPT"
FORMAT_VERSION = 1


def _pack_tensor(name, array):
    array = np.ascontiguousarray(array, dtype="<f8")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", array.ndim)
    head += struct.pack(f"<{array.ndim}Q", *array.shape)
    return head + array.tobytes()


def to_bytes(model, arrays=None, metadata=None):
    meta = {"architecture": model.architecture(), "metadata": metadata or {}}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = [(f"model.{name}", p.data) for name, p in model.named_parameters()]
    tensors += [(f"extra.{name}", np.asarray(v)) for name, v in sorted((arrays or {}).items())]
    body = bytearray(MAGIC)
    body += struct.pack("<II", FORMAT_VERSION, len(blob)) + blob
    body += struct.pack("<I", len(tensors))
    for name, array in tensors:
        body += _pack_tensor(name, array)
    body += struct.pack("<I", zlib.crc32(body))
    return bytes(body)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf):
    """Return ``(model, arrays, metadata)``."""
    if len(buf) < len(MAGIC) + 8 or buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic header)")
    (version,) = struct.unpack_from("<I", buf, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )
    (stored_crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != stored_crc:
        raise CheckpointError(
            f"checkpoint checksum mismatch; file is corrupted (format version {version})"
        )
    r = _Reader(buf[:-4])
    r.take(len(MAGIC) + 4)
    (n,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n).decode("utf-8"))
        model = DhagModel.from_architecture(meta["architecture"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"invalid checkpoint metadata: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after the last tensor")

    for name, param in model.named_parameters():
        key = f"model.{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if tensors[key].shape != param.shape:
            raise CheckpointError(f"parameter {name}: shape {tensors[key].shape} != {param.shape}")
        param.data = tensors.pop(key)
    leftovers = [k for k in tensors if k.startswith("model.")]
    if leftovers:
        raise CheckpointError(f"unexpected parameters in checkpoint: {leftovers}")
    arrays = {k[len("extra.") :]: v for k, v in tensors.items()}
    return model, arrays, meta["metadata"]


def save_checkpoint(path, model, arrays=None, metadata=None):
    Path(path).write_bytes(to_bytes(model, arrays, metadata))


def load_checkpoint(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(buf)
