"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"CAMF"
    version u16      currently 1
    payload          u32 config length + UTF-8 config text,
                     u32 tensor count, then per tensor:
                       u16 name length, name UTF-8,
                       u8 dtype tag (0 = f32, 1 = f64),
                       u8 rank, u32 extents...,
                       row-major little-endian values
    crc     u32      CRC-32 of the payload bytes

Round trips are bit-exact; the CRC is verified on load. Writes go through a
temp file and an atomic rename.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .errors import InputError

MAGIC = b"CAMF"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path: str, config_text: str,
                    tensors: dict[str, np.ndarray]) -> None:
    parts = [struct.pack("<I", len(config_text.encode()))]
    parts.append(config_text.encode())
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _TAG_FOR:
            raise InputError(f"tensor {name}: unsupported dtype {arr.dtype}")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _TAG_FOR[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    payload = b"".join(parts)
    blob = MAGIC + struct.pack("<H", VERSION) + payload + struct.pack(
        "<I", zlib.crc32(payload))
    tmp = path + ".tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[str, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError as exc:
        raise InputError(f"checkpoint not found: {path}") from exc
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise InputError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise InputError(f"{path}: unsupported version {version}")
    payload = blob[6:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) != crc:
        raise InputError(f"{path}: checksum mismatch, file is corrupted")

    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(payload):
            raise InputError(f"{path}: truncated payload")
        chunk = payload[off:off + n]
        off += n
        return chunk

    (cfg_len,) = struct.unpack("<I", take(4))
    config_text = take(cfg_len).decode()
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _DTYPE_TAGS:
            raise InputError(f"{path}: unknown dtype tag {tag} for {name}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPE_TAGS[tag]
        n_items = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(n_items * dt.itemsize), dtype=dt).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("=")).copy()
    return config_text, tensors
