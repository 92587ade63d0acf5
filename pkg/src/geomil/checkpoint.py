"""Binary model checkpoint format.

Layout (all little-endian)::

    magic   "BMIL"
    u32     format version (currently 1)
    config  field-tagged block: u16 field count, then per field
            u16 name length, name bytes (utf-8), u8 type tag, value;
            tags: 0 = i64, 1 = f64, 2 = str (u16 length + utf-8 bytes)
    u32     tensor count, then per tensor:
            u16 name length, name bytes, u8 rank, u32 dims[rank],
            float32 payload (row-major)
    u32     CRC32 of every preceding byte

Writes are atomic (temp file + rename).  Loading verifies magic, version
and checksum before any parsing, so a corrupted file never yields a
partially populated model.
"""

from __future__ import annotations

import dataclasses
import os
import struct
import zlib

import numpy as np

from .model import ModelConfig, ModelParams, init_model, named_params, with_params

MAGIC = b"BMIL"
VERSION = 1

_TAG_INT = 0
_TAG_FLOAT = 1
_TAG_STR = 2


class CheckpointError(ValueError):
    """Malformed, corrupted, or mismatched checkpoint file."""


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"name too long: {name!r}")
    return struct.pack("<H", len(raw)) + raw


def _pack_config(config: ModelConfig) -> bytes:
    items = dataclasses.asdict(config)
    out = [struct.pack("<H", len(items))]
    for key, value in items.items():
        out.append(_pack_name(key))
        if isinstance(value, bool):
            raise CheckpointError("boolean config fields are not supported")
        if isinstance(value, int):
            out.append(struct.pack("<bq", _TAG_INT, value))
        elif isinstance(value, float):
            out.append(struct.pack("<bd", _TAG_FLOAT, value))
        elif isinstance(value, str):
            out.append(struct.pack("<b", _TAG_STR) + _pack_name(value))
        else:
            raise CheckpointError(f"unsupported config field type for {key!r}")
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint file")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def _unpack_config(r: _Reader) -> ModelConfig:
    (count,) = r.unpack("<H")
    raw: dict[str, object] = {}
    for _ in range(count):
        key = r.name()
        (tag,) = r.unpack("<b")
        if tag == _TAG_INT:
            (raw[key],) = r.unpack("<q")
        elif tag == _TAG_FLOAT:
            (raw[key],) = r.unpack("<d")
        elif tag == _TAG_STR:
            raw[key] = r.name()
        else:
            raise CheckpointError(f"unknown config tag {tag} for field {key!r}")
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(raw) - known
    if unknown:
        raise CheckpointError(f"unknown config fields in file: {sorted(unknown)}")
    return ModelConfig(**raw)


def checkpoint_save(params: ModelParams, path: str) -> None:
    """Serialize every parameter tensor; the write is atomic."""
    body = [MAGIC, struct.pack("<I", VERSION), _pack_config(params.config)]
    table = named_params(params)
    body.append(struct.pack("<I", len(table)))
    for name, tensor in table.items():
        arr = np.ascontiguousarray(np.asarray(tensor, dtype="<f4"))
        body.append(_pack_name(name))
        body.append(struct.pack("<B", arr.ndim))
        body.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.append(arr.tobytes())
    blob = b"".join(body)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def checkpoint_load(path: str, expect_config: ModelConfig | None = None) -> ModelParams:
    """Load a checkpoint, verifying checksum and (optionally) the config.

    The checksum covers the whole file, so corruption is detected before
    any tensor is assigned.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError("truncated checkpoint file")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic; not a model checkpoint")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError("checksum mismatch; file is corrupted")

    r = _Reader(data[:-4])
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = _unpack_config(r)
    config.validate()
    if expect_config is not None and config != expect_config:
        raise CheckpointError(
            f"checkpoint config {config} does not match expected {expect_config}"
        )

    (n_tensors,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name = r.name()
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        count = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after tensor table")

    skeleton = init_model(config)
    expected = set(named_params(skeleton))
    if set(tensors) != expected:
        missing = expected - set(tensors)
        extra = set(tensors) - expected
        raise CheckpointError(
            f"tensor table mismatch (missing: {sorted(missing)}, extra: {sorted(extra)})"
        )
    for name, arr in tensors.items():
        if arr.shape != np.shape(named_params(skeleton)[name]):
            raise CheckpointError(
                f"tensor {name!r} has shape {arr.shape}, expected "
                f"{np.shape(named_params(skeleton)[name])}"
            )
    return with_params(skeleton, tensors)
