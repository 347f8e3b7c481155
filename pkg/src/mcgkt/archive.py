"""``MCGW1`` weight archives: a text manifest plus a raw little-endian float32 blob.

Layout::

    b"MCGW1\\n"
    manifest length       8 bytes, little-endian unsigned
    manifest              UTF-8 text
    blob                  concatenated little-endian float32 tensors

Manifest lines are either header lines ``# <key> <json>`` or tensor entries
``<name> f32 <d0,d1,...> <offset> <length>`` where offset/length are byte
positions inside the blob. A 0-d tensor writes its shape as ``-``.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataIOError, FormatError

MAGIC = b"MCGW1\n"
DTYPE_TAG = "f32"


class WeightArchive:
    """Named float32 tensors plus JSON header metadata."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None, header: Mapping | None = None):
        self.tensors: dict[str, np.ndarray] = {}
        self.header: dict = dict(header or {})
        for name, arr in (tensors or {}).items():
            self[name] = arr

    def __setitem__(self, name: str, arr):
        if not name or any(ch.isspace() for ch in name):
            raise FormatError(f"tensor name {name!r} must be non-empty without whitespace")
        self.tensors[name] = np.asarray(arr, dtype="<f4")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name) -> bool:
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def names(self) -> list:
        return list(self.tensors)

    def to_bytes(self) -> bytes:
        lines = [f"# {k} {json.dumps(v, separators=(',', ':'))}" for k, v in self.header.items()]
        chunks, offset = [], 0
        for name, arr in self.tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            dims = ",".join(str(d) for d in arr.shape) or "-"
            lines.append(f"{name} {DTYPE_TAG} {dims} {offset} {len(raw)}")
            chunks.append(raw)
            offset += len(raw)
        manifest = ("\n".join(lines) + "\n").encode("utf-8")
        return MAGIC + struct.pack("<Q", len(manifest)) + manifest + b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightArchive":
        if not data.startswith(MAGIC):
            raise FormatError("missing MCGW1 magic bytes")
        pos = len(MAGIC)
        if len(data) < pos + 8:
            raise FormatError("truncated archive: no manifest length")
        (mlen,) = struct.unpack("<Q", data[pos:pos + 8])
        pos += 8
        if len(data) < pos + mlen:
            raise FormatError("truncated archive: manifest shorter than declared")
        try:
            manifest = data[pos:pos + mlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"manifest is not UTF-8: {exc}") from None
        blob = memoryview(data)[pos + mlen:]

        header, tensors, spans = {}, {}, []
        for lineno, line in enumerate(manifest.splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, payload = line[1:].strip().partition(" ")
                try:
                    header[key] = json.loads(payload)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"manifest line {lineno}: bad header JSON ({exc})") from None
                continue
            parts = line.split()
            if len(parts) != 5:
                raise FormatError(f"manifest line {lineno}: expected 5 fields, got {len(parts)}")
            name, dtype, dims, off, length = parts
            if dtype != DTYPE_TAG:
                raise FormatError(f"manifest line {lineno}: unsupported dtype {dtype!r}")
            if name in tensors:
                raise FormatError(f"manifest line {lineno}: duplicate tensor {name!r}")
            try:
                shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
                off, length = int(off), int(length)
            except ValueError:
                raise FormatError(f"manifest line {lineno}: non-integer shape/offset/length") from None
            if any(d < 0 for d in shape) or off < 0 or length < 0:
                raise FormatError(f"manifest line {lineno}: negative shape/offset/length")
            if int(np.prod(shape, dtype=np.int64)) * 4 != length:
                raise FormatError(f"manifest line {lineno}: shape {shape} needs {int(np.prod(shape)) * 4} bytes, entry says {length}")
            if off + length > len(blob):
                raise FormatError(f"truncated archive: tensor {name!r} extends past the blob")
            spans.append((off, off + length, name))
            tensors[name] = np.frombuffer(blob[off:off + length], dtype="<f4").reshape(shape).copy()
        spans.sort()
        for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
            if s1 < e0:
                raise FormatError(f"tensors {n0!r} and {n1!r} overlap in the blob")
        arch = cls(header=header)
        arch.tensors = tensors
        return arch

    def save(self, path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path) -> "WeightArchive":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise DataIOError(f"cannot read archive {path}: {exc.strerror}") from None
        return cls.from_bytes(data)
