"""On-disk clip layout and dataset manifests.

A clip directory holds ``frame_%04d.ppm`` (one per frame), ``gt.bin`` and
``meta.txt``. ``gt.bin`` is little-endian:

* header: u32 T, u32 H, u32 W
* T x H x W x 2 f32 frame-1 -> frame-t (x, y) locations, row-major
* T bitmaps of H x W visibility flags, each packed MSB-first to ceil(HW/8) bytes
* T x H x W u8 object ids (0 = background); optional trailing section

``meta.txt`` holds ``key=value`` lines.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np

from ..autodiff.serialize import FormatError
from .pnm import read_frame, write_frame
from .synthetic import SyntheticClip

PathLike = Union[str, os.PathLike]


def encode_gt(clip: SyntheticClip) -> bytes:
    T, H, W = clip.visible.shape
    parts = [struct.pack("<3I", T, H, W),
             np.ascontiguousarray(clip.flow, dtype="<f4").tobytes()]
    for t in range(T):
        parts.append(np.packbits(clip.visible[t].reshape(-1)).tobytes())
    parts.append(np.ascontiguousarray(clip.ids, dtype=np.uint8).tobytes())
    return b"".join(parts)


def decode_gt(buf: bytes):
    if len(buf) < 12:
        raise FormatError("gt.bin header truncated", len(buf))
    T, H, W = struct.unpack_from("<3I", buf, 0)
    pos = 12
    nflow = T * H * W * 2 * 4
    if len(buf) < pos + nflow:
        raise FormatError("gt.bin flow section truncated", len(buf))
    flow = np.frombuffer(buf, dtype="<f4", count=T * H * W * 2, offset=pos).reshape(T, H, W, 2)
    pos += nflow
    nbits = (H * W + 7) // 8
    if len(buf) < pos + T * nbits:
        raise FormatError("gt.bin visibility section truncated", len(buf))
    vis = np.empty((T, H, W), dtype=bool)
    for t in range(T):
        packed = np.frombuffer(buf, dtype=np.uint8, count=nbits, offset=pos)
        vis[t] = np.unpackbits(packed)[: H * W].reshape(H, W).astype(bool)
        pos += nbits
    ids = None
    if len(buf) > pos:
        if len(buf) < pos + T * H * W:
            raise FormatError("gt.bin object-id section truncated", len(buf))
        ids = np.frombuffer(buf, dtype=np.uint8, count=T * H * W, offset=pos).reshape(T, H, W).copy()
    return flow.astype(np.float64), vis, ids


def _meta_lines(meta: Dict) -> str:
    lines = []
    for k, v in meta.items():
        val = json.dumps(v) if isinstance(v, (list, dict)) else str(v)
        lines.append(f"{k}={val}")
    return "\n".join(lines) + "\n"


def _parse_meta(text: str) -> Dict:
    meta = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, _, val = line.partition("=")
        val = val.strip()
        try:
            meta[key.strip()] = json.loads(val)
        except json.JSONDecodeError:
            meta[key.strip()] = val
    return meta


def save_clip(clip: SyntheticClip, directory: PathLike) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(clip.frames):
        write_frame(frame, d / f"frame_{t:04d}.ppm")
    (d / "gt.bin").write_bytes(encode_gt(clip))
    (d / "meta.txt").write_text(_meta_lines(clip.meta), encoding="utf-8")
    return d


def load_clip(directory: PathLike) -> SyntheticClip:
    d = Path(directory)
    flow, vis, ids = decode_gt((d / "gt.bin").read_bytes())
    T = flow.shape[0]
    frames = np.stack([read_frame(d / f"frame_{t:04d}.ppm") for t in range(T)])
    meta = _parse_meta((d / "meta.txt").read_text(encoding="utf-8")) if (d / "meta.txt").exists() else {}
    if ids is None:
        ids = np.zeros(vis.shape, dtype=np.uint8)
    return SyntheticClip(frames, flow, vis, ids, meta)


def write_manifest(paths: Sequence[PathLike], manifest: PathLike) -> None:
    text = "".join(f"{p}\n" for p in paths)
    Path(manifest).write_text(text, encoding="utf-8")


def read_manifest(manifest: PathLike) -> List[Path]:
    """Clip directories listed in ``manifest``; relative entries resolve against its folder."""
    m = Path(manifest)
    out = []
    for line in m.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        p = Path(line)
        out.append(p if p.is_absolute() else m.parent / p)
    return out
