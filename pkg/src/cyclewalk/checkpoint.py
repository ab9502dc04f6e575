"""Checkpoint container.

Layout (little-endian)::

    b"CW3K"  u32 version  u32 config_len  config text (UTF-8)
    u64 step  u32 entry count  tensor records ...  u32 CRC32

The CRC covers every byte before it. Tensor records use the shared
serializer: weights under their own names, Adam moments under ``m/<name>``
and ``v/<name>``.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .autodiff.serialize import FormatError, decode_tensors, encode_tensor
from .config import TrainConfig

MAGIC = b"CW3K"
VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    weights: Dict[str, np.ndarray]
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    cfg = ckpt.config.to_text().encode("utf-8")
    entries = list(ckpt.weights.items())
    entries += [(f"m/{k}", a) for k, a in ckpt.m.items()]
    entries += [(f"v/{k}", a) for k, a in ckpt.v.items()]
    body = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg,
            struct.pack("<QI", ckpt.step, len(entries))]
    body += [encode_tensor(name, arr) for name, arr in entries]
    payload = b"".join(body)
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(buf) < 24:
        raise FormatError("checkpoint truncated", len(buf))
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise FormatError("checkpoint CRC mismatch", len(buf) - 4)
    version, cfg_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = 12
    try:
        cfg_text = buf[pos: pos + cfg_len].decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("config text is not UTF-8", pos) from None
    pos += cfg_len
    step, count = struct.unpack_from("<QI", buf, pos)
    pos += 12
    tensors, end = decode_tensors(buf[:-4], count, pos)
    if end != len(buf) - 4:
        raise FormatError("trailing bytes after tensor records", end)
    ckpt = Checkpoint(TrainConfig.from_text(cfg_text), step, {})
    for name, arr in tensors.items():
        if name.startswith("m/"):
            ckpt.m[name[2:]] = arr
        elif name.startswith("v/"):
            ckpt.v[name[2:]] = arr
        else:
            ckpt.weights[name] = arr
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: os.PathLike) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
