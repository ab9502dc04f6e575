"""Random-instance gradient checks shared by the unit tests and the acceptance gate."""

import numpy as np

from cyclewalk.autodiff import (
    Tensor,
    conv2d,
    grid_sample_bilinear,
    instance_norm,
    l2_normalize_nodes,
    log,
    matmul,
    pad2d,
    relu,
    softmax_rows,
)
from cyclewalk.encoder import EncoderConfig, encode, init_weights
from cyclewalk.transforms import AffineTransform, compute_mask, sample_transform, TransformParams, \
    compose_forward_backward
from cyclewalk.walk import multi_cycle_loss

from gradcheck import check_grads, numerical_grad, rel_error

N_INSTANCES = 20
OP_TOL = 1e-5
COMPOSITE_TOL = 1e-4


def _away_from_kinks(x, margin=1e-3):
    """Push values off zero so finite differences do not straddle a relu kink."""
    return np.where(np.abs(x) < margin, np.sign(x + 1e-30) * margin * 2, x)


def _cases(rng):
    """(name, op, inputs) generators for every differentiable op."""
    pads = ("zero", "replicate", "reflect", "none")
    yield "conv2d", lambda i: (
        lambda x, k: conv2d(x, k, 1 + i % 2, pads[i % 4]),
        [rng.standard_normal((1 + i % 2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))])
    yield "conv2d_bias", lambda i: (
        lambda x, k, b: conv2d(x, k, 1, pads[i % 4], bias=b),
        [rng.standard_normal((1, 2, 4, 5)), rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2)])
    yield "softmax_rows", lambda i: (
        lambda z: softmax_rows(z, [0.05, 0.5, 1.0, 2.0][i % 4]),
        [rng.standard_normal((3, 5)) * [0.05, 0.5, 1.0, 2.0][i % 4]])
    yield "grid_sample_bilinear", lambda i: (
        grid_sample_bilinear,
        [rng.standard_normal((2, 4, 5)), rng.uniform(-1.1, 1.1, (3, 4, 2))])
    yield "matmul", lambda i: (
        matmul, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))])
    yield "l2_normalize_nodes", lambda i: (
        l2_normalize_nodes, [rng.standard_normal((3, 3, 4))])
    yield "instance_norm", lambda i: (
        instance_norm, [rng.standard_normal((2, 3, 4, 4))])
    yield "relu", lambda i: (relu, [_away_from_kinks(rng.standard_normal((4, 5)))])
    yield "log", lambda i: (lambda x: log(x, 1e-12), [rng.uniform(0.2, 2.0, (3, 4))])
    yield "pad2d", lambda i: (lambda x: pad2d(x, 1 + i % 2, pads[i % 3]), [rng.standard_normal((1, 2, 4, 5))])
    yield "elementwise", lambda i: (
        lambda a, b: (a * b + a / (b * b + 1.0) - b).sum(axis=1),
        [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))])


def op_gradient_errors(seed=0, n=N_INSTANCES):
    """``{op: [max relative error per instance]}``."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, make in _cases(rng):
        errs = []
        for i in range(n):
            op, arrays = make(i)
            errs.append(check_grads(op, arrays))
        out[name] = errs
    return out


def toy_pipeline(seed):
    """Frames, weights and transforms for a T=2 pipeline with a 4x4 node grid."""
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(num_blocks=2, channels=(3, 4), padding="zero", downsample_factor=2,
                        embed_dim=5, norm="instance")
    w = init_weights(cfg, seed)
    # a node whose relu features all vanish would embed to the zero vector, where
    # the normalization is not differentiable; a nonzero head bias keeps the toy smooth
    w["head.bias"].data = rng.normal(0.0, 0.5, w["head.bias"].shape)
    frames = rng.uniform(0, 1, (2, 2, 3, 8, 8))  # track, time, C, H, W
    bf = sample_transform(rng, TransformParams(scale_range=(0.5, 1.0)))
    bb = sample_transform(rng, TransformParams(scale_range=(0.5, 1.0)))
    b_fb = compose_forward_backward(bf, bb)
    mask = compute_mask(b_fb, (4, 4))
    if not mask.any():
        b_fb, mask = AffineTransform.identity(), np.ones((4, 4), bool)
    return cfg, w, frames, b_fb, mask


def composite_loss(cfg, weights, frames, b_fb, mask, tau=0.5):
    feats = encode(Tensor(frames.reshape(4, 3, 8, 8)), weights, cfg)
    f = feats[0:2].reshape(1, 2, 4, 4, cfg.embed_dim)
    b = feats[2:4].reshape(1, 2, 4, 4, cfg.embed_dim)
    return multi_cycle_loss(f, b, b_fb, mask, tau)


def composite_gradient_error(seed):
    """Relative error of d loss / d weights for the full encoder -> walk -> loss pipeline."""
    cfg, w, frames, b_fb, mask = toy_pipeline(seed)
    names = list(w)
    loss = composite_loss(cfg, w, frames, b_fb, mask)
    loss.backward()
    arrays = [w[k].data.copy() for k in names]

    def scalar(*arrs):
        ws = {k: Tensor(a) for k, a in zip(names, arrs)}
        return float(composite_loss(cfg, ws, frames, b_fb, mask).data)

    worst = 0.0
    for i, k in enumerate(names):
        num = numerical_grad(scalar, arrays, i, 1e-5)
        worst = max(worst, rel_error(w[k].grad, num))
    return worst
