"""EMLB checkpoint files.

Layout (all integers little-endian)::

    b"EMLB" | u32 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    u32 tensor_count
    per tensor: u16 name_len | name | u8 ndim | u32 dims[ndim] | float32 data
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"EMLB"
VERSION = 1


def write_emlb(path, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(meta_raw)))
        fh.write(meta_raw)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_emlb(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: not an EMLB checkpoint")
    try:
        version, meta_len = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        meta = json.loads(blob[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 4 * size > len(blob):
                raise FormatError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
            off += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    return meta, tensors


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def arrays_sha256(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
