"""Binary tensor records shared by checkpoints.

Record layout (little-endian): u32 name length, UTF-8 name, u8 dtype tag
(0 = f32, 1 = f64), u32 rank, u32 extent per axis, row-major payload.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Dict, Iterable, Tuple

import numpy as np

_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """Malformed binary or text input; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int = -1):
        super().__init__(f"{message} (at byte {offset})" if offset >= 0 else message)
        self.offset = offset


def encode_tensor(name: str, array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _TAGS:
        raise ValueError(f"unsupported dtype {arr.dtype} for {name!r}")
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BI", _TAGS[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_tensors(buf: bytes, count: int, offset: int = 0) -> Tuple[Dict[str, np.ndarray], int]:
    """Decode ``count`` records from ``buf`` starting at ``offset``."""
    out: Dict[str, np.ndarray] = {}

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(buf):
            raise FormatError(f"truncated {what}", offset)
        chunk = buf[offset: offset + n]
        offset += n
        return chunk

    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        start = offset
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("name is not UTF-8", start) from None
        tag_at = offset
        tag, rank = struct.unpack("<BI", take(5, "dtype/rank"))
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag}", tag_at)
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        dt = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        payload = take(nbytes, "payload")
        out[name] = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    return out, offset


def write_tensors(fh: BinaryIO, entries: Iterable[Tuple[str, np.ndarray]]) -> None:
    for name, arr in entries:
        fh.write(encode_tensor(name, arr))
