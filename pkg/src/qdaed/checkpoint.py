"""Versioned binary checkpoint container.

Layout::

    b"QDCK" | u16 version | u32 header length | UTF-8 JSON header
    u32 tensor count | tensor blobs (sorted by name) | 8-byte blake2b checksum

Each blob is ``u16 name length, name, u8 kind`` followed by a float32
tensor (``u8 rank, u64 dims..., little-endian payload``) for kind 0, or a
:class:`~qdaed.quantization.PackedIntTensor` for kind 1. All integers are
little-endian. The checksum covers every preceding byte.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ChecksumError, FormatError, TruncationError, VersionError
from .quantization import PackedIntTensor

MAGIC = b"QDCK"
VERSION = 1
_FP32 = 0
_PACKED = 1


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict = field(default_factory=dict)  # name -> ndarray | PackedIntTensor

    @property
    def kind(self):
        return self.meta.get("kind")

    def fp(self, name):
        t = self.tensors[name]
        if isinstance(t, PackedIntTensor):
            raise FormatError(f"tensor {name!r} is packed")
        return t


def _checksum(data):
    return hashlib.blake2b(data, digest_size=8).digest()


def encode_header(meta):
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def to_bytes(ckpt):
    out = bytearray(MAGIC)
    out += struct.pack("<H", VERSION)
    header = encode_header(ckpt.meta)
    out += struct.pack("<I", len(header)) + header
    out += struct.pack("<I", len(ckpt.tensors))
    for name in sorted(ckpt.tensors):
        value = ckpt.tensors[name]
        raw_name = name.encode("utf-8")
        out += struct.pack("<H", len(raw_name)) + raw_name
        if isinstance(value, PackedIntTensor):
            out += struct.pack("<B", _PACKED) + value.to_bytes()
        else:
            arr = np.ascontiguousarray(value, dtype="<f4")
            out += struct.pack("<BB", _FP32, arr.ndim)
            out += b"".join(struct.pack("<Q", d) for d in arr.shape)
            out += arr.tobytes()
    out += _checksum(bytes(out))
    return bytes(out)


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncationError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data):
    r = _Reader(data)
    if bytes(r.take(4)) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    (hlen,) = r.unpack("<I")
    try:
        meta = json.loads(bytes(r.take(hlen)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = bytes(r.take(nlen)).decode("utf-8")
        (kind,) = r.unpack("<B")
        if kind == _FP32:
            (rank,) = r.unpack("<B")
            dims = r.unpack(f"<{rank}Q")
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(bytes(r.take(4 * n)), dtype="<f4").astype(np.float32).reshape(dims)
            tensors[name] = arr
        elif kind == _PACKED:
            packed, end = PackedIntTensor.from_bytes(r.buf, r.pos)
            r.pos = end
            tensors[name] = packed
        else:
            raise FormatError(f"unknown tensor kind {kind} for {name!r}")
    body_end = r.pos
    trailer = bytes(r.take(8))
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after checkpoint checksum")
    if _checksum(bytes(r.buf[:body_end])) != trailer:
        raise ChecksumError("checkpoint checksum mismatch")
    return Checkpoint(meta, tensors)


def save(ckpt, path):
    data = to_bytes(ckpt)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
