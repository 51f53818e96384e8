"""Binary PPM/PGM readers and writers.

Frames are stored as maxval-255 binary pixmaps (P6) and index masks as
binary graymaps (P5) with object ids 1..M and 0 for background.  Both
round-trip bit-exactly for all byte values.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError


def _read_header(data: bytes, magic: bytes, path) -> tuple[int, int, int]:
    if not data.startswith(magic):
        raise DataError(f"{path}: expected {magic.decode()} header")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos] in b" \t\r\n":
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos] not in b" \t\r\n":
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError as exc:
            raise DataError(f"{path}: bad header field {data[start:pos]!r}") from exc
    if pos >= len(data) or data[pos] not in b" \t\r\n":
        raise DataError(f"{path}: missing header terminator")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    return width, height, pos


def read_ppm(path) -> np.ndarray:
    """Read a P6 image as uint8 (h, w, 3)."""
    data = Path(path).read_bytes()
    width, height, pos = _read_header(data, b"P6", path)
    need = width * height * 3
    body = data[pos:pos + need]
    if len(body) != need:
        raise DataError(f"{path}: expected {need} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)


def write_ppm(path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise DataError(f"write_ppm needs uint8 (h, w, 3), got {image.dtype} {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 mask as uint8 (h, w)."""
    data = Path(path).read_bytes()
    width, height, pos = _read_header(data, b"P5", path)
    need = width * height
    body = data[pos:pos + need]
    if len(body) != need:
        raise DataError(f"{path}: expected {need} mask bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width)


def write_pgm(path, mask: np.ndarray) -> None:
    if mask.ndim != 2 or mask.dtype != np.uint8:
        raise DataError(f"write_pgm needs uint8 (h, w), got {mask.dtype} {mask.shape}")
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(mask.tobytes())
