"""Training configuration and its ``key = value`` text form.

Config files are UTF-8, one ``key = value`` per line, ``#`` starts a comment.
Keys are the CLI flag names with or without dashes (``gamma-lo`` and
``gamma_lo`` are the same key).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .autodiff import PADDING_MODES
from .autodiff.serialize import FormatError
from .encoder import EncoderConfig
from .transforms import TransformParams

METHODS = ("vanilla_fc3", "stfc3")
PRECISIONS = ("f32", "f64")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "stfc3"
    padding: str = "zero"
    gamma_lo: float = 0.08
    gamma_hi: float = 1.0
    flip_prob: float = 0.5
    tau: float = 0.05
    cycle_len: int = 4
    batch: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 2000
    color_aug: bool = True
    seed: int = 0
    precision: str = "f32"
    normalize: str = "grid"
    # encoder
    channels: Tuple[int, ...] = (16, 32, 32, 32)
    kernel_size: int = 3
    downsample: int = 4
    embed_dim: int = 64
    head: str = "conv1x1"
    norm: str = "instance"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.padding not in PADDING_MODES:
            raise ValueError(f"padding must be one of {PADDING_MODES}, got {self.padding!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.cycle_len < 2:
            raise ValueError("cycle length must be >= 2")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}")
        if self.normalize not in ("grid", "mask"):
            raise ValueError("normalize must be 'grid' or 'mask'")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        self.transform_params()
        self.encoder_config()

    def transform_params(self) -> TransformParams:
        return TransformParams(scale_range=(self.gamma_lo, self.gamma_hi), flip_prob=self.flip_prob)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(num_blocks=len(self.channels), channels=tuple(self.channels),
                             kernel_size=self.kernel_size, padding=self.padding,
                             downsample_factor=self.downsample, head=self.head,
                             embed_dim=self.embed_dim, norm=self.norm)

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name.replace('_', '-')} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        return (base or cls()).replace(**parse_overrides(parse_kv(text)))


def _format(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_ALIASES = {"cycle_length": "cycle_len", "color": "color_aug"}


def _convert(name: str, raw: str):
    default = _FIELDS[name].default
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("on", "true", "1", "yes"):
            return True
        if low in ("off", "false", "0", "no"):
            return False
        raise ValueError(f"{name} expects on/off, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw.strip()


def parse_kv(text: str) -> Dict[str, str]:
    """Raw ``key = value`` pairs; malformed lines raise :class:`FormatError`."""
    out: Dict[str, str] = {}
    offset = 0
    for line in text.splitlines(keepends=True):
        body = line.split("#", 1)[0].strip()
        if body:
            if "=" not in body:
                raise FormatError(f"expected 'key = value', got {body!r}", offset)
            key, _, val = body.partition("=")
            out[key.strip().replace("-", "_")] = val.strip()
        offset += len(line.encode("utf-8"))
    return out


def parse_overrides(pairs: Dict[str, str]) -> Dict:
    kw = {}
    for key, raw in pairs.items():
        name = _ALIASES.get(key, key)
        if name not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        kw[name] = _convert(name, raw) if isinstance(raw, str) else raw
    return kw


def load_config(path: os.PathLike) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return TrainConfig.from_text(fh.read())
