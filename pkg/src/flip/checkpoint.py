"""Binary checkpoint container.

Layout (little-endian): magic "FLIPCKPT", version u32, tensor count u32,
then per tensor: name length u16 + UTF-8 name, ndim u8, dims u32 each,
raw float32 data in row-major order.

Training state rides on top as named tensors: parameters under
``param/``, Adam moments under ``m/`` and ``v/``, and integer counters /
encoder geometry packed into ``meta/`` entries. Counters are stored as
24-bit lo/hi float pairs so values survive the float32 container
exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataFormatError

MAGIC = b"FLIPCKPT"
VERSION = 1

_U24 = 1 << 24


def _split_u48(x: int) -> tuple[float, float]:
    if not 0 <= x < _U24 * _U24:
        raise ValueError(f"counter out of range: {x}")
    return float(x % _U24), float(x // _U24)


def _join_u48(lo: float, hi: float) -> int:
    return int(round(lo)) + _U24 * int(round(hi))


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays in checkpoint format (values cast to float32)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise DataFormatError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        if off + nbytes > len(raw):
            raise DataFormatError(f"{path}: truncated tensor data for {name!r}")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        tensors[name] = arr.copy()
        off += nbytes
    if off != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return tensors
