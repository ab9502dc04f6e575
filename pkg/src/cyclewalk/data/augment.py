"""Per-frame photometric augmentations (colour jitter, grayscale, blur, solarize).

All ops are pointwise in space except blur, so ground-truth correspondence
stays valid on augmented frames. Frames are ``[3, H, W]`` in ``[0, 1]``.

Hue and saturation go through matplotlib's HSV conversion (hue in [0, 1),
saturation = chroma / max, value = max).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import gaussian_filter

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ColorAugConfig:
    jitter_prob: float = 0.8
    brightness: float = 0.8
    contrast: float = 0.8
    saturation: float = 0.8
    hue: float = 0.2
    grayscale_prob: float = 0.2
    blur_prob: float = 0.2
    blur_sigma: Tuple[float, float] = (0.1, 2.0)
    solarize_prob: float = 0.0
    solarize_threshold: float = 0.5

    def __post_init__(self):
        for name in ("jitter_prob", "grayscale_prob", "blur_prob", "solarize_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if not 0 <= self.hue <= 0.5:
            raise ValueError("hue strength must lie in [0, 0.5]")


FORWARD_PRESET = ColorAugConfig()
BACKWARD_PRESET = ColorAugConfig(brightness=0.4, contrast=0.4, saturation=0.2, hue=0.1,
                                 solarize_prob=0.2)
NO_AUG = ColorAugConfig(jitter_prob=0.0, grayscale_prob=0.0, blur_prob=0.0, solarize_prob=0.0)


def grayscale(frame: np.ndarray) -> np.ndarray:
    g = np.tensordot(LUMA, frame, axes=(0, 0))
    return np.broadcast_to(g, frame.shape).copy()


def adjust_brightness(frame, factor):
    return np.clip(frame * factor, 0.0, 1.0)


def adjust_contrast(frame, factor):
    m = np.tensordot(LUMA, frame, axes=(0, 0)).mean()
    return np.clip(m + factor * (frame - m), 0.0, 1.0)


def adjust_saturation(frame, factor):
    g = np.tensordot(LUMA, frame, axes=(0, 0))
    return np.clip(g + factor * (frame - g), 0.0, 1.0)


def adjust_hue(frame, shift):
    hsv = rgb_to_hsv(np.clip(frame, 0.0, 1.0).transpose(1, 2, 0))
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return hsv_to_rgb(hsv).transpose(2, 0, 1)


def solarize(frame, threshold=0.5):
    return np.where(frame >= threshold, 1.0 - frame, frame)


def blur(frame, sigma):
    return np.stack([gaussian_filter(ch, sigma, mode="reflect") for ch in frame])


def _factor(rng, strength):
    return rng.uniform(max(0.0, 1.0 - strength), 1.0 + strength)


def augment_frame(frame: np.ndarray, config: ColorAugConfig, rng: np.random.Generator) -> np.ndarray:
    out = np.asarray(frame, dtype=np.float64)
    if rng.random() < config.jitter_prob:
        ops = [
            lambda f: adjust_brightness(f, _factor(rng, config.brightness)),
            lambda f: adjust_contrast(f, _factor(rng, config.contrast)),
            lambda f: adjust_saturation(f, _factor(rng, config.saturation)),
            lambda f: adjust_hue(f, rng.uniform(-config.hue, config.hue)),
        ]
        for i in rng.permutation(4):
            out = ops[i](out)
    if rng.random() < config.grayscale_prob:
        out = grayscale(out)
    if rng.random() < config.blur_prob:
        out = blur(out, rng.uniform(*config.blur_sigma))
    if rng.random() < config.solarize_prob:
        out = solarize(out, config.solarize_threshold)
    return np.clip(out, 0.0, 1.0)


def color_augment(frames: np.ndarray, config: ColorAugConfig, rng: np.random.Generator) -> np.ndarray:
    """Augment each frame of ``[T, 3, H, W]`` independently."""
    frames = np.asarray(frames)
    return np.stack([augment_frame(f, config, rng) for f in frames]).astype(frames.dtype, copy=False)
