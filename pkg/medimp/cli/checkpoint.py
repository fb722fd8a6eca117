"""Binary checkpoint format.

Layout, all little-endian::

    magic     8 bytes  b"MEDIMPCK"
    version   uint32
    logit     float64  logit scale
    meta      uint32 length + UTF-8 JSON (encoder configs, vocabulary)
    count     uint32
    tensors   count x (uint16 name length, name, uint8 dtype code, uint8 ndim,
              ndim x uint32 extents, payload)

Tensor payloads are float32.
"""
import json
import logging
import struct
from pathlib import Path

import numpy as np

from medimp.exceptions import CheckpointError
from medimp.schemas import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, Checkpoint
from medimp.storage import atomic_write_bytes

logger = logging.getLogger(__name__)

DTYPES = {b"f": np.dtype("<f4")}
_PAYLOAD_CODE = b"f"


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    meta = json.dumps(checkpoint.metadata, sort_keys=True).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", checkpoint.version),
        struct.pack("<d", checkpoint.logit_scale),
        struct.pack("<I", len(meta)),
        meta,
        struct.pack("<I", len(checkpoint.tensors)),
    ]
    for name in sorted(checkpoint.tensors):
        array = np.asarray(checkpoint.tensors[name])
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(_PAYLOAD_CODE + struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=DTYPES[_PAYLOAD_CODE]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.payload):
            raise CheckpointError(f"checkpoint {self.source} is truncated while reading {what}")
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(payload, source)
    magic = reader.take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source} is not a checkpoint: magic {magic!r} != {CHECKPOINT_MAGIC!r}")
    (version,) = reader.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint {source} has format version {version}, this build reads version {CHECKPOINT_VERSION}")
    (logit_scale,) = reader.unpack("<d", "logit scale")
    (meta_len,) = reader.unpack("<I", "metadata length")
    try:
        metadata = json.loads(reader.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint {source} has unreadable metadata: {e}")
    (count,) = reader.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "tensor name length")
        name = reader.take(name_len, "tensor name").decode("utf-8", errors="replace")
        if name in tensors:
            raise CheckpointError(f"checkpoint {source} holds tensor {name!r} twice")
        code = reader.take(1, f"dtype of {name}")
        if code not in DTYPES:
            raise CheckpointError(f"checkpoint {source}: tensor {name!r} has unknown dtype code {code!r}")
        (ndim,) = reader.unpack("<B", f"rank of {name}")
        shape = reader.unpack(f"<{ndim}I", f"shape of {name}")
        dtype = DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(reader.take(size, f"payload of {name}"), dtype=dtype).reshape(shape)
        tensors[name] = data.astype(np.float64)
    if reader.offset != len(payload):
        raise CheckpointError(f"checkpoint {source} has {len(payload) - reader.offset} trailing bytes")
    return Checkpoint(logit_scale=logit_scale, tensors=tensors, metadata=metadata, version=version)


def write_checkpoint(path: str | Path, checkpoint: Checkpoint) -> Path:
    out = atomic_write_bytes(path, encode_checkpoint(checkpoint))
    logger.info("Wrote checkpoint with %d tensors to %s", len(checkpoint.tensors), out)
    return out


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    return decode_checkpoint(payload, str(path))
