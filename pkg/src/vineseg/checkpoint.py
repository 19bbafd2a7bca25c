"""Binary checkpoint archive.

Layout, all integers 4-byte little-endian unsigned::

    b"VSEG" | version | tensor count
    per tensor: name length | UTF-8 name | rank | extents... | float32 LE payload
    config length | UTF-8 config echo (key = value lines)

The config echo carries the run configuration plus ``metric.*`` lines for the
final metrics. Nothing follows it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kvfile import dump_kv, parse_kv

MAGIC = b"VSEG"
FORMAT_VERSION = 1
METRIC_PREFIX = "metric."


class CheckpointError(ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class Truncated(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict  # name -> float32 ndarray, insertion ordered
    config: dict = field(default_factory=dict)  # key -> string value
    metrics: dict = field(default_factory=dict)  # key -> float
    version: int = FORMAT_VERSION

    def echo_text(self) -> str:
        items = dict(self.config)
        items.update({METRIC_PREFIX + k: v for k, v in self.metrics.items()})
        return dump_kv(items)


def encode(ckpt: Checkpoint) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", ckpt.version, len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    echo = ckpt.echo_text().encode("utf-8")
    out += struct.pack("<I", len(echo)) + echo
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise Truncated(f"checkpoint truncated while reading {what} at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < 4:
        if MAGIC.startswith(buf):
            raise Truncated("checkpoint truncated inside the magic bytes")
        raise BadMagic(f"not a checkpoint: magic {buf!r}")
    if buf[:4] != MAGIC:
        raise BadMagic(f"not a checkpoint: magic {buf[:4]!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.pos = 4
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format version {version}, this reader supports {FORMAT_VERSION}")
    count = r.u32("tensor count")
    tensors = {}
    for i in range(count):
        nlen = r.u32(f"name length of tensor {i}")
        try:
            name = r.take(nlen, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor {i}: name is not UTF-8 ({exc})") from None
        rank = r.u32(f"rank of {name}")
        shape = tuple(r.u32(f"extent {k} of {name}") for k in range(rank))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = r.take(4 * n, f"payload of {name}")
        if name in tensors:
            raise CheckpointError(f"tensor {name!r} appears twice")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    elen = r.u32("config length")
    try:
        text = r.take(elen, "config echo").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"config echo is not UTF-8 ({exc})") from None
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} unexpected trailing bytes after the config echo")
    config, metrics = {}, {}
    for _, key, value in parse_kv(text, "<checkpoint config>"):
        if key.startswith(METRIC_PREFIX):
            metrics[key[len(METRIC_PREFIX):]] = float(value)
        else:
            config[key] = value
    return Checkpoint(tensors, config, metrics, version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
