"""Binary container for named float64 tensors plus a JSON metadata block.

Layout (all integers little-endian)::

    magic        4 bytes      b"GCMT" for checkpoints, b"GCMD" for datasets
    version      u32
    meta_len     u32
    meta         meta_len bytes of UTF-8 JSON (sorted keys, compact)
    n_tensors    u32
    per tensor:  name_len u32, name (UTF-8), ndim u32, dims u64 * ndim,
                 data float64 little-endian, row-major
    crc          u32, CRC-32 of every preceding byte

Tensors are written in the order given, which callers keep canonical.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def encode(magic: bytes, meta: Mapping, tensors: Mapping[str, np.ndarray], version: int = FORMAT_VERSION) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    parts = [magic, struct.pack("<I", version)]
    mb = dumps_json(meta).encode("utf-8")
    parts += [struct.pack("<I", len(mb)), mb, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes, magic: bytes, version: int = FORMAT_VERSION) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 16:
        raise ContainerError("file truncated: shorter than the fixed header")
    if blob[:4] != magic:
        raise ContainerError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ContainerError("checksum mismatch: file is corrupted or truncated")
    (ver,) = struct.unpack_from("<I", body, 4)
    if ver != version:
        raise ContainerError(f"format version {ver} is not supported (expected {version})")
    pos = 8
    try:
        (mlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(body[pos : pos + mlen].decode("utf-8"))
        pos += mlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(body):
                raise ContainerError(f"tensor {name!r} runs past the end of the file")
            tensors[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"malformed container: {exc}") from exc
    if pos != len(body):
        raise ContainerError(f"{len(body) - pos} trailing bytes after the last tensor")
    return meta, tensors


def write(path, magic: bytes, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(magic, meta, tensors))


def read(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)
