"""Small fully convolutional encoder producing a grid of unit-norm node embeddings."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .autodiff import (
    PADDING_MODES,
    Tensor,
    as_tensor,
    conv2d,
    conv_output_size,
    instance_norm,
    l2_normalize,
    relu,
    transpose,
)

HEADS = ("conv1x1", "two_fc")
NORMS = ("instance", "none")
FEATURE_SOURCES = ("head", "backbone")

Weights = Dict[str, Tensor]


@dataclass(frozen=True)
class EncoderConfig:
    num_blocks: int = 4
    channels: Tuple[int, ...] = (16, 32, 32, 32)
    kernel_size: int = 3
    padding: str = "zero"
    downsample_factor: int = 4
    head: str = "conv1x1"
    embed_dim: int = 64
    hidden_dim: int = 128  # only used by the two_fc head
    norm: str = "instance"

    def __post_init__(self):
        if len(self.channels) != self.num_blocks:
            raise ValueError(f"need {self.num_blocks} channel counts, got {self.channels}")
        if self.padding not in PADDING_MODES:
            raise ValueError(f"unknown padding mode {self.padding!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        ds = self.downsample_factor
        if ds < 1 or ds & (ds - 1):
            raise ValueError(f"downsample_factor must be a power of two, got {ds}")
        if len(self.strides) > self.num_blocks:
            raise ValueError("not enough blocks to reach the downsample factor")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and positive")

    @property
    def strides(self) -> Tuple[int, ...]:
        n_down = int(self.downsample_factor).bit_length() - 1
        return tuple(2 if i < n_down else 1 for i in range(max(self.num_blocks, n_down)))


def node_grid_shape(config: EncoderConfig, height: int, width: int) -> Tuple[int, int]:
    """Spatial extent of the node grid for an ``height x width`` input."""
    h, w = height, width
    for s in config.strides:
        h = conv_output_size(h, config.kernel_size, s, config.padding)
        w = conv_output_size(w, config.kernel_size, s, config.padding)
    return h, w


def node_centres(config: EncoderConfig, size: int) -> np.ndarray:
    """Input pixel coordinate of each node centre along one axis."""
    n_out = size
    geom = []
    for s in config.strides:
        p = 0 if config.padding == "none" else (config.kernel_size - 1) // 2
        geom.append((s, p))
        n_out = conv_output_size(n_out, config.kernel_size, s, config.padding)
    c = np.arange(n_out, dtype=np.float64)
    for s, p in reversed(geom):
        c = c * s - p + (config.kernel_size - 1) / 2.0
    return c


def check_input(config: EncoderConfig, height: int, width: int) -> None:
    ds = config.downsample_factor
    if config.padding != "none" and (height % ds or width % ds):
        raise ValueError(f"input {height}x{width} not divisible by downsample factor {ds}")
    h = height
    w = width
    for s in config.strides:
        if h < config.kernel_size or w < config.kernel_size:
            raise ValueError(f"input {height}x{width} too small for the conv stack")
        h = conv_output_size(h, config.kernel_size, s, config.padding)
        w = conv_output_size(w, config.kernel_size, s, config.padding)
    if h < 1 or w < 1:
        raise ValueError(f"input {height}x{width} leaves no nodes with padding={config.padding}")


def init_weights(config: EncoderConfig, seed: int, dtype=np.float64) -> Weights:
    """Fan-in scaled uniform (He) initialisation; biases start at zero."""
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    weights: Weights = OrderedDict()

    def uniform(shape):
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

    c_in = 3
    for i, c_out in enumerate(config.channels):
        weights[f"block{i}.weight"] = uniform((c_out, c_in, k, k))
        if config.norm == "none":
            weights[f"block{i}.bias"] = zeros(c_out)
        c_in = c_out
    if config.head == "conv1x1":
        weights["head.weight"] = uniform((config.embed_dim, c_in, 1, 1))
        weights["head.bias"] = zeros(config.embed_dim)
    else:
        weights["head.fc1.weight"] = uniform((config.hidden_dim, c_in, 1, 1))
        weights["head.fc1.bias"] = zeros(config.hidden_dim)
        weights["head.fc2.weight"] = uniform((config.embed_dim, config.hidden_dim, 1, 1))
        weights["head.fc2.bias"] = zeros(config.embed_dim)
    return weights


def encode(frames, weights: Weights, config: EncoderConfig, features: str = "head") -> Tensor:
    """Encode ``[N, 3, H, W]`` frames into unit-norm node embeddings ``[N, H', W', C]``.

    ``features="backbone"`` skips the head and normalizes the last block's
    activations instead (the evaluation-time feature). A node whose activations
    are all zero maps to the constant vector ``1 / sqrt(C)``.
    """
    x = as_tensor(frames)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected frames [N, 3, H, W], got {x.shape}")
    if features not in FEATURE_SOURCES:
        raise ValueError(f"unknown feature source {features!r}")
    check_input(config, x.shape[2], x.shape[3])
    for i, s in enumerate(config.strides):
        x = conv2d(x, weights[f"block{i}.weight"], s, config.padding,
                   bias=weights.get(f"block{i}.bias"))
        if config.norm == "instance":
            x = instance_norm(x)
        x = relu(x)
    if features == "head":
        if config.head == "conv1x1":
            x = conv2d(x, weights["head.weight"], 1, "none", bias=weights["head.bias"])
        else:
            x = relu(conv2d(x, weights["head.fc1.weight"], 1, "none", bias=weights["head.fc1.bias"]))
            x = conv2d(x, weights["head.fc2.weight"], 1, "none", bias=weights["head.fc2.bias"])
    x = transpose(x, (0, 2, 3, 1))
    out = l2_normalize(x, axis=-1)
    dead = ~np.any(x.data != 0, axis=-1, keepdims=True)
    if dead.any():
        # a node with every activation at zero has no direction; give it the
        # constant unit vector so the unit-norm contract holds (gradient is zero there)
        C = x.shape[-1]
        out = out + Tensor(np.broadcast_to(dead, x.shape).astype(x.dtype) / np.sqrt(C))
    return out


@dataclass
class FeatureMap:
    """Node grid of one frame of one track."""

    values: Tensor  # [H', W', C], unit-norm nodes
    frame: int = 0
    track: str = "forward"

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]


def encode_frames(frames, weights: Weights, config: EncoderConfig, track: str = "forward",
                  features: str = "head") -> List[FeatureMap]:
    """Per-frame :class:`FeatureMap` list for a ``[T, 3, H, W]`` clip."""
    out = encode(frames, weights, config, features=features)
    return [FeatureMap(out[t], frame=t, track=track) for t in range(out.shape[0])]
