"""Training loop: batch construction, the two methods, Adam and metrics logging.

Every step draws its randomness from ``SeedSequence([seed, step])`` split
into independent streams for clip selection, spatial transforms and colour
augmentation. A run is therefore a pure function of (config, clips), batches
can be prepared ahead of time in worker threads without changing results, and
a resumed checkpoint continues exactly where the original run would have.
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .autodiff import Tensor, index
from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig
from .data.augment import BACKWARD_PRESET, FORWARD_PRESET, color_augment
from .data.synthetic import SyntheticClip
from .encoder import encode, init_weights, node_grid_shape
from .transforms import AffineTransform, apply_to_frames, compose_forward_backward, compute_mask, \
    sample_transform
from .walk import multi_cycle_loss


class Adam:
    """Adam with bias correction; state is plain numpy so it checkpoints directly."""

    def __init__(self, params: Dict[str, Tensor], lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            mhat = self.m[k] / c1
            vhat = self.v[k] / c2
            p.data = (p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


@dataclass
class Batch:
    forward: np.ndarray  # [B, T, 3, H, W]
    backward: np.ndarray  # [B, T, 3, H, W], time order
    B_fb: np.ndarray  # [B, 2, 3]
    mask: np.ndarray  # [B, H', W']
    clip_index: np.ndarray
    start: np.ndarray


def step_rngs(seed: int, step: int, n: int = 3) -> List[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence([seed, step]).spawn(n)]


def make_batch(clips: Sequence[SyntheticClip], config: TrainConfig, step: int) -> Batch:
    r_sel, r_tf, r_col = step_rngs(config.seed, step)
    T = config.cycle_len
    n = len(clips)
    idx = r_sel.choice(n, size=config.batch, replace=n < config.batch)
    starts = np.array([r_sel.integers(0, clips[i].T - T + 1) for i in idx])
    params = config.transform_params()
    enc = config.encoder_config()
    H, W = clips[0].frames.shape[-2:]
    grid = node_grid_shape(enc, H, W)

    fwd, bwd, mats, masks = [], [], [], []
    for i, t0 in zip(idx, starts):
        window = clips[i].frames[t0:t0 + T]
        if config.method == "stfc3":
            bf = sample_transform(r_tf, params)
            bb = sample_transform(r_tf, params)
            xf = apply_to_frames(window, bf, (H, W))
            xb = apply_to_frames(window, bb, (H, W))
            if config.color_aug:
                xf = color_augment(xf, FORWARD_PRESET, r_col)
                xb = color_augment(xb, BACKWARD_PRESET, r_col)
            b_fb = compose_forward_backward(bf, bb)
            m = compute_mask(b_fb, grid)
        else:
            # one transform for both tracks: the walk returns over the same frames
            b = sample_transform(r_tf, params)
            xf = apply_to_frames(window, b, (H, W))
            if config.color_aug:
                xf = color_augment(xf, FORWARD_PRESET, r_col)
            xb = xf
            b_fb = AffineTransform.identity()
            m = np.ones(grid, dtype=bool)
        fwd.append(xf)
        bwd.append(xb)
        mats.append(b_fb.matrix)
        masks.append(m)
    dt = config.dtype
    return Batch(np.stack(fwd).astype(dt), np.stack(bwd).astype(dt), np.stack(mats),
                 np.stack(masks), idx, starts)


def batch_loss(weights: Dict[str, Tensor], batch: Batch, config: TrainConfig) -> Tensor:
    """Encode both tracks in one pass and return the multi-cycle loss."""
    enc = config.encoder_config()
    B, T = batch.forward.shape[:2]
    frames = np.concatenate([batch.forward, batch.backward]).reshape((2 * B * T,) + batch.forward.shape[2:])
    feats = encode(Tensor(frames), weights, enc)
    h, w, c = feats.shape[1:]
    f = index(feats, slice(0, B * T)).reshape(B, T, h, w, c)
    b = index(feats, slice(B * T, 2 * B * T)).reshape(B, T, h, w, c)
    return multi_cycle_loss(f, b, batch.B_fb, batch.mask, config.tau, config.normalize)


@dataclass
class TrainState:
    config: TrainConfig
    weights: Dict[str, Tensor]
    optimizer: Adam
    step: int = 0
    losses: List[float] = field(default_factory=list)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.config, self.step, {k: p.data.copy() for k, p in self.weights.items()},
                          {k: a.copy() for k, a in self.optimizer.m.items()},
                          {k: a.copy() for k, a in self.optimizer.v.items()})


def init_state(config: TrainConfig) -> TrainState:
    weights = init_weights(config.encoder_config(), config.seed, dtype=config.dtype)
    opt = Adam(weights, config.lr, (config.beta1, config.beta2), config.adam_eps)
    return TrainState(config, weights, opt)


def state_from_checkpoint(ckpt: Checkpoint, config: Optional[TrainConfig] = None) -> TrainState:
    config = config or ckpt.config
    weights = {k: Tensor(a.astype(config.dtype), requires_grad=True) for k, a in ckpt.weights.items()}
    opt = Adam(weights, config.lr, (config.beta1, config.beta2), config.adam_eps)
    for k in weights:
        if k in ckpt.m:
            opt.m[k] = ckpt.m[k].astype(config.dtype)
            opt.v[k] = ckpt.v[k].astype(config.dtype)
    opt.t = ckpt.step
    return TrainState(config, weights, opt, step=ckpt.step)


def train_step(state: TrainState, batch: Batch) -> float:
    state.optimizer.zero_grad()
    loss = batch_loss(state.weights, batch, state.config)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    value = float(loss.item())
    state.losses.append(value)
    return value


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CW3_THREADS", "1")))
    except ValueError:
        return 1


def train(config: TrainConfig, clips: Sequence[SyntheticClip], state: Optional[TrainState] = None,
          metrics_path: Optional[os.PathLike] = None, ckpt_path: Optional[os.PathLike] = None,
          deterministic: bool = True, until: Optional[int] = None,
          on_step: Optional[Callable[[int, float], None]] = None) -> TrainState:
    """Run optimizer steps up to ``until`` (default ``config.steps``).

    With ``deterministic`` batches are built serially on the calling thread
    and ``wall_ms`` is logged as 0 so repeated runs give identical metrics
    files. Otherwise up to ``CW3_THREADS`` workers build batches ahead.
    """
    if not clips:
        raise ValueError("training needs at least one clip")
    if any(c.T < config.cycle_len for c in clips):
        raise ValueError(f"every clip needs at least {config.cycle_len} frames")
    state = state or init_state(config)
    end = config.steps if until is None else until
    steps = range(state.step, end)

    fh = writer = None
    if metrics_path is not None:
        new = state.step == 0 or not os.path.exists(metrics_path)
        fh = open(metrics_path, "w" if new else "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(["step", "loss", "wall_ms"])

    threads = 1 if deterministic else worker_count()
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        if pool is None:
            batches = (make_batch(clips, config, s) for s in steps)
        else:
            batches = _prefetch(pool, clips, config, steps, depth=2 * threads)
        for s, batch in zip(steps, batches):
            t0 = time.perf_counter()
            loss = train_step(state, batch)
            ms = 0 if deterministic else int(round(1000 * (time.perf_counter() - t0)))
            if writer is not None:
                writer.writerow([s + 1, repr(loss), ms])
            if on_step is not None:
                on_step(s + 1, loss)
    finally:
        if pool is not None:
            pool.shutdown(wait=True, cancel_futures=True)
        if fh is not None:
            fh.close()
    if ckpt_path is not None:
        save_checkpoint(state.checkpoint(), ckpt_path)
    return state


def _prefetch(pool, clips, config, steps, depth):
    pending = []
    it = iter(steps)
    for s in it:
        pending.append(pool.submit(make_batch, clips, config, s))
        if len(pending) >= depth:
            break
    for s in it:
        yield pending.pop(0).result()
        pending.append(pool.submit(make_batch, clips, config, s))
    while pending:
        yield pending.pop(0).result()
