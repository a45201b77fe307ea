"""Binary tensor, checkpoint and mask file formats.

TSR1 record::

    b"TSR1" | u8 dtype (0=f32, 1=f64) | u8 rank | rank x u32 LE extents | payload LE

CKP1 file::

    b"CKP1" | u32 count | count x (u16 name length | UTF-8 name | TSR1 record)
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

TSR_MAGIC = b"TSR1"
CKP_MAGIC = b"CKP1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


def write_tsr(fh: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype not in _CODES:
        raise TypeError(f"TSR1 stores float32/float64 only, got {array.dtype}")
    code = _CODES[array.dtype]
    fh.write(TSR_MAGIC)
    fh.write(struct.pack("<BB", code, array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())


def read_tsr(fh: BinaryIO, source: str = "<stream>") -> np.ndarray:
    magic = fh.read(4)
    if magic != TSR_MAGIC:
        raise FormatError(f"{source}: bad TSR1 magic {magic!r}")
    head = fh.read(2)
    if len(head) != 2:
        raise FormatError(f"{source}: truncated TSR1 header")
    code, rank = struct.unpack("<BB", head)
    if code not in _DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError(f"{source}: truncated TSR1 extents")
    shape = struct.unpack(f"<{rank}I", raw)
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError(f"{source}: TSR1 payload has {len(payload)} bytes, expected {nbytes}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save_tsr(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tsr(fh, array)


def load_tsr(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tsr(fh, str(path))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after TSR1 record")
    return arr


def dumps_ckp(entries: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(CKP_MAGIC)
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_tsr(buf, arr)
    return buf.getvalue()


def save_ckp(path, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_ckp(entries))


def load_ckp(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    fh = io.BytesIO(data)
    if fh.read(4) != CKP_MAGIC:
        raise FormatError(f"{path}: bad CKP1 magic")
    (count,) = struct.unpack("<I", fh.read(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", fh.read(2))
        name = fh.read(n).decode("utf-8")
        if name in out:
            raise FormatError(f"{path}: duplicate entry {name!r}")
        out[name] = read_tsr(fh, f"{path}:{name}")
    if fh.read(1):
        raise FormatError(f"{path}: trailing bytes after CKP1 entries")
    return out


def save_pgm(path, mask: np.ndarray) -> None:
    """Write a boolean mask as binary PGM (P5) with values 0/255."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    pixels = np.where(mask.astype(bool), 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def load_pgm(path) -> np.ndarray:
    """Read a 0/255 P5 PGM into a boolean array; any other value is an error."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: bad PGM magic {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: PGM maxval must be 255, got {maxval}")
    pixels = np.frombuffer(data[pos:], dtype=np.uint8)
    if pixels.size != w * h:
        raise FormatError(f"{path}: PGM payload has {pixels.size} bytes, expected {w * h}")
    bad = (pixels != 0) & (pixels != 255)
    if bad.any():
        raise FormatError(f"{path}: mask values must be 0 or 255, found {int(pixels[bad][0])}")
    return (pixels == 255).reshape(h, w)
