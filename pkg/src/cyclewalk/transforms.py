"""Random resized crop + flip as affine maps, feature warping and validity masks.

Coordinates are normalized so that ``(-1, -1)`` is the centre of the top-left
pixel (or node) and ``(1, 1)`` the centre of the bottom-right one. An
:class:`AffineTransform` stores the 2x3 *sampling* matrix: it maps a location
in the transformed (output) image to the location in the source image that
gets read. Composition follows function composition, ``compose(a, b)(u) ==
a(b(u))``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import Tensor, as_tensor, bilinear_sample, grid_sample_bilinear, transpose

_MIN_DET = 1e-6


@dataclass(frozen=True)
class TransformParams:
    scale_range: Tuple[float, float] = (0.08, 1.0)
    aspect_range: Tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    flip_prob: float = 0.5

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"scale range must satisfy 0 < lo <= hi <= 1, got {self.scale_range}")
        alo, ahi = self.aspect_range
        if not 0 < alo <= ahi:
            raise ValueError(f"bad aspect range {self.aspect_range}")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")


@dataclass(frozen=True)
class AffineTransform:
    matrix: np.ndarray
    flip: bool = False
    crop: Optional[Tuple[float, float, float, float]] = None  # x0, y0, x1, y1 in source coords
    scale_range: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(2, 3)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), crop=(-1.0, -1.0, 1.0, 1.0))

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix[:, :2]))

    def homogeneous(self) -> np.ndarray:
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])

    def inverse(self) -> "AffineTransform":
        if abs(self.det) < _MIN_DET:
            raise ValueError(f"affine transform is singular (det={self.det:.3g})")
        a = self.matrix[:, :2]
        t = self.matrix[:, 2]
        if a[0, 1] == 0.0 and a[1, 0] == 0.0:
            # exact for the crop/flip family, keeps identity bit-exact
            ainv = np.diag([1.0 / a[0, 0], 1.0 / a[1, 1]])
        else:
            ainv = np.linalg.inv(a)
        return AffineTransform(np.hstack([ainv, (-ainv @ t)[:, None]]))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map ``[..., 2]`` points ``(x, y)``."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.matrix[:, :2].T + self.matrix[:, 2]

    def to_bytes(self) -> bytes:
        return struct.pack("<6d", *self.matrix.reshape(-1))

    @classmethod
    def from_bytes(cls, raw: bytes) -> "AffineTransform":
        return cls(np.array(struct.unpack("<6d", raw)).reshape(2, 3))


def compose(a: AffineTransform, b: AffineTransform) -> AffineTransform:
    """``compose(a, b)(u) == a(b(u))``."""
    m = a.homogeneous() @ b.homogeneous()
    return AffineTransform(m[:2])


def sample_transform(rng: np.random.Generator, params: TransformParams) -> AffineTransform:
    """Draw a random resized crop (area ratio uniform in ``scale_range``) plus optional flip.

    The area ratio is drawn once; the aspect ratio is redrawn (log-uniform) up to
    ten times until the crop fits. If no draw fits, the aspect is clamped to the
    feasible interval for that area. When the aspect range admits no feasible
    value at all, a centred crop at the upper area bound is used.
    """
    lo, hi = params.scale_range
    alo, ahi = params.aspect_range
    area = rng.uniform(lo, hi)
    log_lo, log_hi = math.log(alo), math.log(ahi)
    w = h = None
    for _ in range(10):
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw, ch = math.sqrt(area * aspect), math.sqrt(area / aspect)
        if cw <= 1.0 and ch <= 1.0:
            w, h = cw, ch
            break
    centred = False
    if w is None:
        feas_lo, feas_hi = max(alo, area), min(ahi, 1.0 / area)
        if feas_lo <= feas_hi:
            aspect = min(max(aspect, feas_lo), feas_hi)
            w, h = min(math.sqrt(area * aspect), 1.0), min(math.sqrt(area / aspect), 1.0)
        else:
            w = h = math.sqrt(hi)
            centred = True
    if centred:
        cx = cy = 0.0
    else:
        cx = (1.0 - w) * rng.uniform(-1.0, 1.0)
        cy = (1.0 - h) * rng.uniform(-1.0, 1.0)
    flip = bool(rng.random() < params.flip_prob)
    sx = -w if flip else w
    matrix = np.array([[sx, 0.0, cx], [0.0, h, cy]])
    return AffineTransform(matrix, flip=flip, crop=(cx - w, cy - h, cx + w, cy + h),
                           scale_range=(lo, hi))


def compose_forward_backward(bf: AffineTransform, bb: AffineTransform) -> AffineTransform:
    """Sampling matrix that warps forward-track features onto the backward track.

    A backward-crop location ``u`` sees source point ``bb(u)``, which the
    forward crop holds at ``bf^-1(bb(u))``.
    """
    if abs(bf.det) < _MIN_DET:
        raise ValueError("forward transform is singular")
    return compose(bf.inverse(), bb)


def base_grid(height: int, width: int, dtype=np.float64) -> np.ndarray:
    """``[H, W, 2]`` normalized ``(x, y)`` centres of an ``H x W`` grid."""
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1).astype(dtype)


def affine_grid(matrices: np.ndarray, height: int, width: int, dtype=np.float64) -> np.ndarray:
    """Sampling locations ``[N, H, W, 2]`` for a stack of ``[N, 2, 3]`` matrices."""
    m = np.asarray(matrices, dtype=np.float64).reshape(-1, 2, 3)
    g = base_grid(height, width)
    out = np.einsum("hwk,njk->nhwj", g, m[:, :, :2]) + m[:, None, None, :, 2]
    return out.astype(dtype)


def _as_matrices(B: Union[AffineTransform, Sequence[AffineTransform], np.ndarray]) -> np.ndarray:
    if isinstance(B, AffineTransform):
        return B.matrix[None]
    if isinstance(B, np.ndarray):
        return B.reshape(-1, 2, 3)
    return np.stack([b.matrix for b in B])


def _interp_matrix(n_out: int, n_in: int, scale: float, shift: float) -> np.ndarray:
    """``[n_out, n_in]`` 1-D bilinear weights for source ``scale * u + shift``, zero fill."""
    u = np.linspace(-1.0, 1.0, n_out) if n_out > 1 else np.zeros(1)
    p = (scale * u + shift + 1.0) * 0.5 * (n_in - 1)
    p0 = np.floor(p)
    f = p - p0
    p0 = p0.astype(np.int64)
    R = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for idx, w in ((p0, 1.0 - f), (p0 + 1, f)):
        ok = (idx >= 0) & (idx < n_in)
        R[rows[ok], idx[ok]] += w[ok]
    return R


def apply_to_frames(frames: np.ndarray, B: AffineTransform, out_size: Tuple[int, int]) -> np.ndarray:
    """Resample pixel frames ``[T, 3, H, W]`` through one transform (no autodiff).

    Axis-aligned maps (crop and flip) are separable, so they run as two small
    matrix products; anything else goes through the general sampler.
    """
    frames = np.asarray(frames)
    m = B.matrix
    if m[0, 1] == 0.0 and m[1, 0] == 0.0:
        H, W = frames.shape[-2:]
        ry = _interp_matrix(out_size[0], H, m[1, 1], m[1, 2]).astype(frames.dtype)
        rx = _interp_matrix(out_size[1], W, m[0, 0], m[0, 2]).astype(frames.dtype)
        return ry @ frames @ rx.T
    grid = affine_grid(B.matrix[None], *out_size, dtype=frames.dtype)
    grid = np.broadcast_to(grid, (frames.shape[0],) + grid.shape[1:])
    return bilinear_sample(frames, grid)


def warp_feature(F, B) -> Tensor:
    """Warp node-last features ``[H, W, C]`` or ``[N, H, W, C]`` through ``B``.

    Output node ``u`` holds the bilinear sample of ``F`` at ``B(u)``; samples
    falling off the grid read zeros.
    """
    F = as_tensor(F)
    mats = _as_matrices(B)
    single = F.ndim == 3
    x = F.reshape((1,) + F.shape) if single else F
    N, H, W, C = x.shape
    if mats.shape[0] == 1 and N > 1:
        mats = np.broadcast_to(mats, (N, 2, 3))
    grid = Tensor(affine_grid(mats, H, W, dtype=x.dtype))
    out = grid_sample_bilinear(transpose(x, (0, 3, 1, 2)), grid)
    out = transpose(out, (0, 2, 3, 1))
    return out.reshape(F.shape) if single else out


def coverage(B, grid_shape: Tuple[int, int]) -> np.ndarray:
    """Warp of an all-ones map: fraction of each node backed by real samples."""
    mats = _as_matrices(B)
    H, W = grid_shape
    ones = np.ones((mats.shape[0], 1, H, W))
    cov = bilinear_sample(ones, affine_grid(mats, H, W))[:, 0]
    return cov[0] if isinstance(B, AffineTransform) else cov


def compute_mask(B, grid_shape: Tuple[int, int], threshold: float = 0.5) -> np.ndarray:
    """Binary validity mask: nodes whose warped all-ones value exceeds ``threshold``."""
    return coverage(B, grid_shape) > threshold
