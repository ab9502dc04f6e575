"""Transition matrices, palindrome walks and the masked multi-cycle loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Union

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    index,
    l2_normalize,
    log,
    matmul,
    mul,
    softmax_rows,
    transpose,
)
from .autodiff import reduce_sum as tsum
from .encoder import FeatureMap
from .transforms import AffineTransform, _as_matrices, compute_mask, warp_feature

LOG_EPS = 1e-12
NORMALIZATIONS = ("grid", "mask")

FeatureLike = Union[Tensor, FeatureMap, np.ndarray]


def _values(f: FeatureLike) -> Tensor:
    return f.values if isinstance(f, FeatureMap) else as_tensor(f)


def _nodes(f: Tensor) -> Tensor:
    """Flatten ``[..., H, W, C]`` to ``[..., H*W, C]``."""
    s = f.shape
    return f.reshape(s[:-3] + (s[-3] * s[-2], s[-1]))


def affinity(src: FeatureLike, dst: FeatureLike, tau: float) -> Tensor:
    """Row-stochastic transition matrix ``softmax_j(<src_i, dst_j> / tau)``."""
    a, b = _values(src), _values(dst)
    if a.shape != b.shape:
        raise ValueError(f"feature grids differ: {a.shape} vs {b.shape}")
    na, nb = _nodes(a), _nodes(b)
    return softmax_rows(matmul(na, transpose(nb, _swap_last(nb.ndim))), tau)


def _swap_last(ndim: int):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


@dataclass
class PalindromeBatch:
    """Inputs of one warped palindrome ``[F1^fb, F2^f .. FT^f, FT^b .. F1^b]``.

    ``forward`` holds the *unwarped* forward features in time order and
    ``backward`` the backward-track features in time order; the start is warped
    through ``B_fb`` and masked when the walk is built.
    """

    forward: List[FeatureLike]
    backward: List[FeatureLike]
    B_fb: AffineTransform
    mask: np.ndarray
    tau: float = 0.05

    def __post_init__(self):
        if len(self.forward) != len(self.backward) or len(self.forward) < 2:
            raise ValueError("forward and backward tracks need equal length T >= 2")
        shapes = {_values(f).shape for f in list(self.forward) + list(self.backward)}
        if len(shapes) != 1:
            raise ValueError(f"feature grids differ: {shapes}")

    @property
    def T(self) -> int:
        return len(self.forward)


def warp_start(F: FeatureLike, B_fb, mask: np.ndarray) -> Tensor:
    """Warp a start map onto the backward track, re-normalize valid nodes, zero the rest."""
    w = l2_normalize(warp_feature(_values(F), B_fb), axis=-1)
    m = np.asarray(mask, dtype=w.dtype)
    return mul(w, Tensor(m[..., None]))


def palindrome_transition(batch: PalindromeBatch, start: int = 0) -> Tensor:
    """Ordered product of the ``2(T - start) - 1`` transitions of one warped cycle."""
    fwd = [_values(f) for f in batch.forward[start:]]
    bwd = [_values(f) for f in batch.backward[start:]]
    seq = [warp_start(fwd[0], batch.B_fb, batch.mask)] + fwd[1:] + bwd[::-1]
    A = affinity(seq[0], seq[1], batch.tau)
    for a, b in zip(seq[1:-1], seq[2:]):
        A = matmul(A, affinity(a, b, batch.tau))
    return A


def _diag(A: Tensor) -> Tensor:
    n = A.shape[-1]
    idx = np.arange(n)
    return index(A, (Ellipsis, idx, idx))


def masked_cycle_loss(A_cyc: Tensor, mask, normalize: str = "grid") -> Tensor:
    """Masked cross-entropy of walks returning to their start node.

    ``normalize="grid"`` divides by the node count; ``"mask"`` divides by the
    number of valid nodes instead. Leading batch axes are averaged.
    """
    return _loss_from_diag(_diag(as_tensor(A_cyc)), mask, normalize)


def _loss_from_diag(diag: Tensor, mask, normalize: str) -> Tensor:
    if normalize not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {normalize!r}")
    n = diag.shape[-1]
    m = np.asarray(mask, dtype=diag.dtype)
    m = m.reshape(diag.shape) if m.size == diag.size else np.broadcast_to(m.reshape(-1), diag.shape)
    if normalize == "grid":
        denom = np.full(diag.shape[:-1] + (1,), float(n), dtype=diag.dtype)
    else:
        denom = np.maximum(m.sum(axis=-1, keepdims=True), 1.0)
    per_seq = tsum(mul(log(diag, LOG_EPS), Tensor(-m / denom)), axis=-1)
    return per_seq.mean() if per_seq.ndim else per_seq


def multi_cycle_loss(forward, backward, B_fb, mask, tau: float = 0.05,
                     normalize: str = "grid") -> Tensor:
    """Sum over start frames ``k = 1 .. T-1`` of the masked cycle loss.

    ``forward`` and ``backward`` are ``[B, T, H, W, C]`` (a missing batch axis
    is added) in time order. ``B_fb`` is one transform or ``[B, 2, 3]``
    matrices, ``mask`` is ``[B, H, W]``. The ``2T - 1`` transitions and the
    shared middle of every cycle are built once, so cost grows linearly in T.
    """
    f, b = _stack_track(forward), _stack_track(backward)
    if f.shape != b.shape:
        raise ValueError(f"track shapes differ: {f.shape} vs {b.shape}")
    Bsz, T, H, W, C = f.shape
    if T < 2:
        raise ValueError("cycle length T must be >= 2")
    N = H * W
    mats = _as_matrices(B_fb)
    if mats.shape[0] == 1:
        mats = np.broadcast_to(mats, (Bsz, 2, 3))
    m = np.asarray(mask, dtype=bool).reshape(-1, H, W)
    if m.shape[0] == 1:
        m = np.broadcast_to(m, (Bsz, H, W))

    # warped starts for every k: [B, T-1, N, C]
    starts = f[:, : T - 1].reshape(Bsz * (T - 1), H, W, C)
    warped = warp_start(starts, np.repeat(mats, T - 1, axis=0), np.repeat(m, T - 1, axis=0))
    warped = warped.reshape(Bsz, T - 1, N, C)
    fn = f.reshape(Bsz, T, N, C)
    bn = b.reshape(Bsz, T, N, C)

    def trans(src, dst):
        return softmax_rows(matmul(src, transpose(dst, _swap_last(dst.ndim))), tau)

    first = trans(warped, fn[:, 1:])              # ws_k -> f_{k+1}
    turn = trans(fn[:, T - 1], bn[:, T - 1])      # f_T -> b_T
    back = trans(bn[:, 1:], bn[:, : T - 1])       # b_{j+1} -> b_j
    fwd = trans(fn[:, 1: T - 1], fn[:, 2:]) if T > 2 else None  # f_j -> f_{j+1}

    mask_nodes = m.reshape(Bsz, N)
    total = None
    P = matmul(turn, back[:, T - 2])
    for k in range(T - 2, -1, -1):
        if k < T - 2:
            P = matmul(matmul(fwd[:, k], P), back[:, k])
        # diag(first_k @ P) without forming the full product
        diag = tsum(mul(first[:, k], transpose(P, (0, 2, 1))), axis=-1)
        term = _loss_from_diag(diag, mask_nodes, normalize)
        total = term if total is None else total + term
    return total


def _stack_track(track) -> Tensor:
    if isinstance(track, (list, tuple)):
        from .autodiff import stack
        vals = [_values(f) for f in track]
        return stack(vals, axis=0).reshape((1, len(vals)) + vals[0].shape)
    t = as_tensor(track)
    return t.reshape((1,) + t.shape) if t.ndim == 4 else t


def naive_multi_cycle_loss(forward: Sequence[FeatureLike], backward: Sequence[FeatureLike],
                           B_fb: AffineTransform, mask, tau: float = 0.05,
                           normalize: str = "grid") -> Tensor:
    """Reference: build every cycle's full product independently and sum the losses."""
    batch = PalindromeBatch(list(forward), list(backward), B_fb, mask, tau)
    total = None
    for k in range(batch.T - 1):
        term = masked_cycle_loss(palindrome_transition(batch, start=k),
                                 np.asarray(mask).reshape(-1), normalize)
        total = term if total is None else total + term
    return total


def cycle_mask(B_fb, grid_shape, threshold: float = 0.5) -> np.ndarray:
    return compute_mask(B_fb, grid_shape, threshold)
