"""Differentiable operations used by the encoder, the walk and the warps.

Every op takes and returns :class:`Tensor`. Backward closures capture only
what they need so the tape can be released after a single pass.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from .tensor import Tensor, as_tensor, make_result

PADDING_MODES = ("zero", "replicate", "reflect", "none")


def _coerce(a, b) -> Tuple[Tensor, Tensor]:
    """Promote python scalars / arrays to tensors of the partner's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log of ``x + eps``."""
    shifted = x.data + eps if eps else x.data
    return make_result(np.log(shifted), (x,), lambda g: (g / shifted,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def index(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic(idx)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result(np.asarray(x.data[idx]), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                       lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return make_result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with optional shared leading batch dims."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), backward)


def softmax_rows(logits: Tensor, tau: float = 1.0) -> Tensor:
    """Softmax of ``logits / tau`` along the last axis."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = logits.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y / tau,)

    return make_result(y, (logits,), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale vectors along ``axis`` to unit norm; zero vectors stay zero."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    y = x.data / (n + eps)

    def backward(g):
        inv_n = np.divide(1.0, n, out=np.zeros_like(n), where=n > 0)
        proj = (y * g).sum(axis=axis, keepdims=True)
        return (g / (n + eps) - y * proj * inv_n,)

    return make_result(y, (x,), backward)


def l2_normalize_nodes(feature: Tensor) -> Tensor:
    """Normalize each node of an ``[..., H, W, C]`` feature grid."""
    return l2_normalize(feature, axis=-1)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _pad_index(n: int, p: int, mode: str) -> np.ndarray:
    i = np.arange(-p, n + p)
    if mode == "replicate":
        return np.clip(i, 0, n - 1)
    if mode == "reflect":
        i = np.abs(i)
        return np.where(i > n - 1, 2 * (n - 1) - i, i)
    raise ValueError(mode)


def pad2d(x: Tensor, pad: int, mode: str) -> Tensor:
    """Pad the two trailing spatial axes of ``[..., H, W]`` by ``pad`` per side."""
    if mode not in PADDING_MODES:
        raise ValueError(f"unknown padding mode {mode!r}")
    if pad == 0 or mode == "none":
        return x
    H, W = x.shape[-2:]
    if mode == "zero":
        widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
        return make_result(np.pad(x.data, widths), (x,),
                           lambda g: (np.ascontiguousarray(g[..., pad:pad + H, pad:pad + W]),))
    if mode == "reflect" and (pad >= H or pad >= W):
        raise ValueError(f"reflect padding {pad} needs spatial extents > {pad}")
    ri, ci = _pad_index(H, pad, mode), _pad_index(W, pad, mode)
    out = x.data[..., ri, :][..., ci]
    border_r = [r for r in range(len(ri)) if not pad <= r < pad + H]
    border_c = [c for c in range(len(ci)) if not pad <= c < pad + W]

    def backward(g):
        rows = g[..., pad:pad + H, :].copy()
        for r in border_r:
            rows[..., ri[r], :] += g[..., r, :]
        cols = rows[..., pad:pad + W].copy()
        for c in border_c:
            cols[..., ci[c]] += rows[..., c]
        return (cols,)

    return make_result(out, (x,), backward)


def conv_output_size(n: int, k: int, stride: int, padding: str) -> int:
    p = 0 if padding == "none" else (k - 1) // 2
    return (n + 2 * p - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "zero",
           bias: Optional[Tensor] = None) -> Tensor:
    """2-D cross-correlation of ``[N, C, H, W]`` with ``[K, C, kh, kw]``.

    Padded modes add ``(k - 1) // 2`` per side; ``none`` is a valid convolution.
    """
    if padding not in PADDING_MODES:
        raise ValueError(f"unknown padding mode {padding!r}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    N, C, H, W = x.shape
    K, Ck, kh, kw = kernel.shape
    if C != Ck:
        raise ValueError(f"input has {C} channels, kernel expects {Ck}")
    p = 0 if padding == "none" else (kh - 1) // 2
    if kh != kw and padding != "none":
        raise ValueError("padded modes need square kernels")
    if kh > H + 2 * p or kw > W + 2 * p:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {H + 2 * p}x{W + 2 * p}")

    xp = pad2d(x, p, padding)
    Hp, Wp = xp.shape[-2:]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    xd, wd = xp.data, kernel.data
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1: stride, : (Wo - 1) * stride + 1: stride]
    # win: [N, C, Ho, Wo, kh, kw]; columns are laid out channel-major [C*kh*kw, N*Ho*Wo]
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * kh * kw, N * Ho * Wo)
    wmat = wd.reshape(K, C * kh * kw)
    out = (wmat @ cols).reshape(K, N, Ho, Wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, K, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gT = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(K, N * Ho * Wo)
        gw = (gT @ cols.T).reshape(K, C, kh, kw) if kernel.requires_grad else None
        gx = None
        if xp.requires_grad:
            gcols = (wmat.T @ gT).reshape(C, kh, kw, N, Ho, Wo)
            gx = np.zeros((C, N, Hp, Wp), dtype=gcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i: i + stride * (Ho - 1) + 1: stride,
                       j: j + stride * (Wo - 1) + 1: stride] += gcols[:, i, j]
            gx = gx.transpose(1, 0, 2, 3)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (xp, kernel) if bias is None else (xp, kernel, bias)
    return make_result(out, parents, backward)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane of ``[N, C, H, W]`` to zero mean, unit variance."""
    m = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - m
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gym = (g * y).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - y * gym),)

    return make_result(y, (x,), backward)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _bilinear_setup(H: int, W: int, grid: np.ndarray):
    """Corner indices, weights and validity for align-corners bilinear sampling."""
    px = (grid[..., 0] + 1.0) * 0.5 * (W - 1)
    py = (grid[..., 1] + 1.0) * 0.5 * (H - 1)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        # d(weight)/d(px), d(weight)/d(py)
        dwx = (1.0 if dx else -1.0) * wy
        dwy = (1.0 if dy else -1.0) * wx
        corners.append((np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1), valid, wx * wy, dwx, dwy))
    return corners


def bilinear_sample(feature: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Plain-array sampler; ``feature`` is ``[N, C, H, W]``, ``grid`` is ``[N, H2, W2, 2]``."""
    N, C, H, W = feature.shape
    fl = feature.transpose(0, 2, 3, 1)
    n = np.arange(N).reshape(N, 1, 1)
    out = 0.0
    for yi, xi, valid, w, _, _ in _bilinear_setup(H, W, grid):
        out = out + fl[n, yi, xi] * (w * valid)[..., None]
    return np.ascontiguousarray(np.asarray(out, dtype=feature.dtype).transpose(0, 3, 1, 2))


def grid_sample_bilinear(feature: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling at normalized ``(x, y)`` locations with zero fill.

    ``(-1, -1)`` is the top-left pixel centre and ``(1, 1)`` the bottom-right
    one. Accepts ``feature [C, H, W]`` with ``grid [H2, W2, 2]``, or a leading
    batch axis on both.
    """
    feature, grid = as_tensor(feature), as_tensor(grid)
    if grid.shape[-1] != 2:
        raise ValueError(f"grid last extent must be 2, got {grid.shape}")
    unbatched = feature.ndim == 3
    fd = feature.data[None] if unbatched else feature.data
    gd = grid.data[None] if unbatched else grid.data
    if fd.ndim != 4 or gd.ndim != 4 or fd.shape[0] != gd.shape[0]:
        raise ValueError(f"incompatible feature {feature.shape} and grid {grid.shape}")
    N, C, H, W = fd.shape
    corners = _bilinear_setup(H, W, gd)
    fl = fd.transpose(0, 2, 3, 1)  # [N, H, W, C]
    n = np.arange(N).reshape(N, 1, 1)
    gathered = [fl[n, yi, xi] * valid[..., None] for yi, xi, valid, _, _, _ in corners]
    out = 0.0
    for v, (_, _, _, w, _, _) in zip(gathered, corners):
        out = out + v * w[..., None]
    out = np.asarray(out, dtype=fd.dtype).transpose(0, 3, 1, 2)
    if unbatched:
        out = out[0]
    out = np.ascontiguousarray(out)

    def backward(g):
        gb = g[None] if unbatched else g
        gl = gb.transpose(0, 2, 3, 1)  # [N, H2, W2, C]
        gf = gg = None
        if feature.requires_grad:
            # scatter-add of the four corner contributions as one sparse product
            base = n * H * W
            rows = np.concatenate([(base + yi * W + xi).reshape(-1) for yi, xi, _, _, _, _ in corners])
            vals = np.concatenate([(w * valid).reshape(-1) for _, _, valid, w, _, _ in corners])
            m = gl.shape[0] * gl.shape[1] * gl.shape[2]
            cols = np.tile(np.arange(m), 4)
            scatter = sparse.csr_matrix((vals.astype(fd.dtype), (rows, cols)), shape=(N * H * W, m))
            acc = np.asarray(scatter @ gl.reshape(m, C), dtype=fd.dtype)
            gf = acc.reshape(N, H, W, C).transpose(0, 3, 1, 2)
            gf = np.ascontiguousarray(gf[0] if unbatched else gf)
        if grid.requires_grad:
            dpx = 0.0
            dpy = 0.0
            for v, (_, _, _, _, dwx, dwy) in zip(gathered, corners):
                s = (gl * v).sum(axis=-1)
                dpx = dpx + s * dwx
                dpy = dpy + s * dwy
            gg = np.stack([dpx * 0.5 * (W - 1), dpy * 0.5 * (H - 1)], axis=-1).astype(gd.dtype)
            gg = gg[0] if unbatched else gg
        return gf, gg

    return make_result(out, (feature, grid), backward)
