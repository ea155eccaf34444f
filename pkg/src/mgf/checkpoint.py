"""MGF1 checkpoint container.

Layout (all little-endian)::

    b"MGF1"  u32 version  u64 meta_len  meta (UTF-8 JSON, sorted keys)
    u32 n_arrays
    n_arrays x { u16 name_len  name  u8 ndim  ndim x u64 dim  f64 data }
    u32 crc32 of everything above

Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from mgf.errors import CheckpointError

MAGIC = b"MGF1"
VERSION = 1


def encode(meta: Mapping, arrays: Mapping[str, np.ndarray]) -> bytes:
    meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(meta_b)), meta_b, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8", order="C")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(raw) < 4 and MAGIC.startswith(raw):
        raise CheckpointError("corrupt checkpoint: truncated header")
    if raw[:4] != MAGIC:
        raise CheckpointError("not an MGF checkpoint")
    if len(raw) < 20:
        raise CheckpointError("corrupt checkpoint: truncated header")
    version, meta_len = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, crc = raw[:-4], raw[-4:]
    if struct.unpack("<I", crc)[0] != zlib.crc32(body):
        raise CheckpointError("corrupt checkpoint: checksum mismatch or truncated file")
    try:
        pos = 16
        meta = json.loads(body[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(body, dtype="<f8", count=n, offset=pos)
            pos += 8 * n
            arrays[name] = data.reshape(shape).astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError("corrupt checkpoint: trailing bytes")
    return meta, arrays


def write(path: str | Path, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(encode(meta, arrays))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode(raw)
