"""Versioned binary checkpoint container.

Layout: magic ``JSEG``, u32 format version, 32-byte SHA-256 of the
canonical config text, u32 record count, then per parameter a
length-prefixed name, dtype code, shape, and raw little-endian values.
Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import Config, config_hash
from .errors import DataError

MAGIC = b"JSEG"
VERSION = 1
_DTYPES = {0: "<f8", 1: "<f4"}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


def save_checkpoint(path, params: dict, cfg: Config) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += config_hash(cfg)
    blob += struct.pack("<I", len(params))
    for name, tensor in params.items():
        data = tensor.data
        if not data.flags.c_contiguous:
            data = np.copy(data, order="C")  # keeps 0-d shape, unlike ascontiguousarray
        code = _CODES.get(data.dtype)
        if code is None:
            raise DataError(f"{name}: unsupported dtype {data.dtype}")
        encoded = name.encode()
        blob += struct.pack("<I", len(encoded)) + encoded
        blob += struct.pack("<BB", code, data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.astype(_DTYPES[code], copy=False).tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], bytes]:
    """Return (name -> array, config hash); raises DataError on bad files."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    cfg_hash = data[8:40]
    (count,) = struct.unpack_from("<I", data, 40)
    pos = 44
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + name_len].decode()
            pos += name_len
            code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            dtype = np.dtype(_DTYPES[code])
            n_bytes = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
            raw = data[pos:pos + n_bytes]
            if len(raw) != n_bytes:
                raise DataError(f"{path}: truncated record for {name}")
            pos += n_bytes
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    except (struct.error, KeyError) as exc:
        raise DataError(f"{path}: corrupt checkpoint: {exc}") from exc
    if len(arrays) != count:
        raise DataError(f"{path}: duplicate parameter names")
    return arrays, cfg_hash
