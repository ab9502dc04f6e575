"""Binary portable pixmap / graymap reading and writing.

Frames are float arrays ``[3, H, W]`` with values in ``[0, 1]``. P5 (gray)
input is promoted to three identical channels.
"""

from __future__ import annotations

import os
from typing import Tuple

import numpy as np

from ..autodiff.serialize import FormatError

_WS = b" \t\r\n\v\f"


def _header(buf: bytes) -> Tuple[bytes, int, int, int, int]:
    """Parse ``magic width height maxval``; returns them plus the payload offset."""
    if len(buf) < 2:
        raise FormatError("file too short for a PNM header", 0)
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r}", 0)
    pos = 2
    last_end = 2
    fields = []
    starts = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise FormatError("truncated header", pos)
        c = buf[pos:pos + 1]
        if c in (b" ", b"\t", b"\r", b"\n", b"\v", b"\f"):
            pos += 1
            continue
        if c == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos == last_end:
            raise FormatError("missing whitespace between header fields", pos)
        tok_start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if pos == tok_start:
            raise FormatError(f"non-numeric header field {buf[pos:pos + 1]!r}", pos)
        fields.append(int(buf[tok_start:pos]))
        starts.append(tok_start)
        last_end = pos
    if pos >= len(buf) or buf[pos] not in _WS:
        raise FormatError("expected single whitespace before payload", pos)
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"bad dimensions {width}x{height}", starts[0] if width < 1 else starts[1])
    if not 1 <= maxval <= 255:
        raise FormatError(f"only 8-bit maxval supported, got {maxval}", starts[2])
    return magic, width, height, maxval, pos


def decode_pnm(buf: bytes) -> np.ndarray:
    magic, width, height, maxval, pos = _header(buf)
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    if len(buf) - pos < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf) - pos}", len(buf))
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    img = raw.reshape(height, width, channels).astype(np.float64) / maxval
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def read_frame(path: os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def quantize(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(frame: np.ndarray) -> bytes:
    f = np.asarray(frame)
    if f.ndim != 3 or f.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] frame, got {f.shape}")
    _, h, w = f.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + quantize(f).transpose(1, 2, 0).tobytes()


def encode_pgm(image: np.ndarray) -> bytes:
    """8-bit graymap from ``[H, W]`` values in [0, 1] (or uint8 as-is)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"expected [H, W] image, got {img.shape}")
    data = img if img.dtype == np.uint8 else quantize(img)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(data).tobytes()


def write_frame(frame: np.ndarray, path: os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(frame))


def write_gray(image: np.ndarray, path: os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(image))
