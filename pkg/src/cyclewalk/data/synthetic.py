"""Synthetic videos with exact dense correspondence.

A scene is a band-limited noise background moved by a global per-frame
affine map, with textured sprites on top that translate along smooth
trajectories. Textures are sums of random sinusoids, so every frame is
rendered analytically (no resampling) and the frame-1 -> frame-t
correspondence is known in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np


@dataclass(frozen=True)
class ClipConfig:
    T: int = 8
    height: int = 64
    width: int = 64
    num_sprites: int = 3
    sprite_size: Tuple[float, float] = (7.0, 13.0)  # half-extent range in pixels
    texture_components: int = 24
    texture_band: Tuple[float, float] = (1.0 / 32.0, 1.0 / 6.0)  # cycles per pixel
    texture_contrast: float = 0.2
    motion: float = 2.0  # sprite speed, pixels per frame
    camera_ratio: float = 0.5  # camera speed relative to sprite speed
    zoom: float = 0.0  # max relative camera zoom per frame

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("clips need T >= 2")
        if self.height < 8 or self.width < 8:
            raise ValueError("frames must be at least 8x8")
        lo, hi = self.sprite_size
        if not 0 < lo <= hi:
            raise ValueError(f"bad sprite size range {self.sprite_size}")
        if self.num_sprites and 2 * hi > min(self.height, self.width):
            raise ValueError(f"sprites up to {2 * hi:g}px do not fit a {self.height}x{self.width} frame")
        if self.motion < 0:
            raise ValueError("motion must be non-negative")


@dataclass
class Texture:
    base: np.ndarray  # [3]
    freqs: np.ndarray  # [K, 2] cycles per pixel (x, y)
    phases: np.ndarray  # [K]
    amps: np.ndarray  # [K, 3]

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """RGB values ``[..., 3]`` at continuous pixel coordinates."""
        arg = 2 * np.pi * (x[..., None] * self.freqs[:, 0] + y[..., None] * self.freqs[:, 1]) + self.phases
        return self.base + np.sin(arg) @ self.amps


def random_texture(rng: np.random.Generator, n: int, band: Tuple[float, float], contrast: float) -> Texture:
    mag = rng.uniform(band[0], band[1], n)
    ang = rng.uniform(0, 2 * np.pi, n)
    freqs = np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=1)
    amps = rng.standard_normal((n, 3))
    # unit-variance sum of sinusoids scaled to the requested per-channel std
    amps *= contrast * np.sqrt(2.0 / n)
    base = rng.uniform(0.3, 0.7, 3)
    return Texture(base, freqs, rng.uniform(0, 2 * np.pi, n), amps)


@dataclass
class Sprite:
    texture: Texture
    half_size: Tuple[float, float]  # (a, b) half extents along x, y
    shape: str  # "ellipse" | "rect"
    start: np.ndarray  # centre (x, y) at frame 0
    steps: np.ndarray  # [T-1, 2] per-step displacement

    def centres(self) -> np.ndarray:
        return self.start + np.vstack([np.zeros((1, 2)), np.cumsum(self.steps, axis=0)])

    def contains(self, x: np.ndarray, y: np.ndarray, centre: np.ndarray) -> np.ndarray:
        u = (x - centre[0]) / self.half_size[0]
        v = (y - centre[1]) / self.half_size[1]
        if self.shape == "ellipse":
            return u * u + v * v <= 1.0
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)


@dataclass
class Scene:
    background: Texture
    camera_steps: np.ndarray  # [T-1, 2, 3]; maps a frame-t pixel to frame t+1
    sprites: List[Sprite] = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.camera_steps.shape[0] + 1

    def camera(self) -> np.ndarray:
        """Cumulative frame-0 -> frame-t background maps ``[T, 2, 3]``."""
        out = [np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])]
        for step in self.camera_steps:
            prev = np.vstack([out[-1], [0, 0, 1]])
            out.append((np.vstack([step, [0, 0, 1]]) @ prev)[:2])
        return np.stack(out)


@dataclass
class SyntheticClip:
    frames: np.ndarray  # [T, 3, H, W] in [0, 1]
    flow: np.ndarray  # [T, H, W, 2] frame-0 pixel (x, y) -> location in frame t
    visible: np.ndarray  # [T, H, W] bool
    ids: np.ndarray  # [T, H, W] uint8 object id (0 = background, s + 1 = sprite s)
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.frames.shape[0]


def _translation(dx: float, dy: float) -> np.ndarray:
    return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy]])


def sample_scene(rng: np.random.Generator, config: ClipConfig) -> Scene:
    c = config
    H, W = c.height, c.width
    bg = random_texture(rng, c.texture_components, c.texture_band, c.texture_contrast)

    cam_speed = c.motion * c.camera_ratio
    ang = rng.uniform(0, 2 * np.pi)
    turn = rng.uniform(-0.3, 0.3)
    zoom = rng.uniform(-c.zoom, c.zoom)
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    steps = []
    for t in range(c.T - 1):
        a = ang + turn * t
        s = 1.0 + zoom
        # zoom about the frame centre, then translate
        steps.append(np.array([[s, 0.0, (1 - s) * cx + cam_speed * np.cos(a)],
                               [0.0, s, (1 - s) * cy + cam_speed * np.sin(a)]]))
    camera_steps = np.stack(steps) if steps else np.zeros((0, 2, 3))

    sprites = []
    lo, hi = c.sprite_size
    for _ in range(c.num_sprites):
        a, b = rng.uniform(lo, hi, 2)
        tex = random_texture(rng, c.texture_components, (c.texture_band[0] * 2, c.texture_band[1] * 1.5),
                             c.texture_contrast * 1.5)
        start = np.array([rng.uniform(a, W - 1 - a), rng.uniform(b, H - 1 - b)])
        speed = c.motion * rng.uniform(0.5, 1.0)
        heading = rng.uniform(0, 2 * np.pi)
        omega = rng.uniform(-0.4, 0.4)
        hd = heading + omega * np.arange(c.T - 1)
        sprite_steps = speed * np.stack([np.cos(hd), np.sin(hd)], axis=1)
        sprites.append(Sprite(tex, (a, b), "ellipse" if rng.random() < 0.5 else "rect", start,
                              sprite_steps.reshape(-1, 2)))
    return Scene(bg, camera_steps, sprites)


def owner_at(scene: Scene, t: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Top-most object id at continuous frame-t locations (later sprites are on top)."""
    ids = np.zeros(np.shape(x), dtype=np.uint8)
    for s, sprite in enumerate(scene.sprites):
        ids[sprite.contains(x, y, sprite.centres()[t])] = s + 1
    return ids


def render_clip(scene: Scene, height: int, width: int, meta: Optional[dict] = None) -> SyntheticClip:
    T = scene.T
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    cams = scene.camera()
    frames = np.empty((T, 3, height, width))
    ids = np.empty((T, height, width), dtype=np.uint8)
    for t in range(T):
        inv = _invert(cams[t])
        bx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
        by = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
        img = scene.background(bx, by)
        for sprite in scene.sprites:
            c = sprite.centres()[t]
            inside = sprite.contains(xs, ys, c)
            img[inside] = sprite.texture(xs[inside] - c[0], ys[inside] - c[1])
        frames[t] = np.clip(img, 0.0, 1.0).transpose(2, 0, 1)
        ids[t] = owner_at(scene, t, xs, ys)

    flow = np.empty((T, height, width, 2))
    visible = np.empty((T, height, width), dtype=bool)
    own0 = ids[0]
    for t in range(T):
        cam = cams[t]
        mx = cam[0, 0] * xs + cam[0, 1] * ys + cam[0, 2]
        my = cam[1, 0] * xs + cam[1, 1] * ys + cam[1, 2]
        for s, sprite in enumerate(scene.sprites):
            sel = own0 == s + 1
            d = sprite.centres()[t] - sprite.centres()[0]
            mx[sel] = xs[sel] + d[0]
            my[sel] = ys[sel] + d[1]
        flow[t, ..., 0], flow[t, ..., 1] = mx, my
        inside = (mx >= -0.5) & (mx < width - 0.5) & (my >= -0.5) & (my < height - 0.5)
        visible[t] = inside & (owner_at(scene, t, mx, my) == own0)
    return SyntheticClip(frames, flow, visible, ids, dict(meta or {}))


def _invert(m: np.ndarray) -> np.ndarray:
    a = np.linalg.inv(m[:, :2])
    return np.hstack([a, (-a @ m[:, 2])[:, None]])


def generate_clip(seed: int, config: ClipConfig = ClipConfig()) -> SyntheticClip:
    """Deterministic clip for ``seed``."""
    rng = np.random.default_rng(seed)
    scene = sample_scene(rng, config)
    meta = {"seed": seed, "T": config.T, "height": config.height, "width": config.width,
            "num_sprites": config.num_sprites, "motion": config.motion,
            "camera_steps": scene.camera_steps.reshape(-1).tolist(),
            "sprite_steps": [s.steps.reshape(-1).tolist() for s in scene.sprites],
            "sprite_starts": [s.start.tolist() for s in scene.sprites]}
    return render_clip(scene, config.height, config.width, meta)


def compose_steps(camera_steps: np.ndarray) -> np.ndarray:
    """Chain per-step background maps into frame-0 -> frame-t maps (reference path)."""
    return Scene(None, np.asarray(camera_steps)).camera()
