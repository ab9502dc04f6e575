"""Label propagation with restricted top-k attention, plus match-rate and region scoring.

Labels live on the node grid: a label map is ``[H', W', L]`` with one channel
per class (segmentation) or per keypoint. Frame ``t`` reads from the first
frame and up to ``m`` of its most recent predecessors; each target node only
attends to source nodes within Chebyshev radius ``r`` of its own grid position,
keeps the ``k`` strongest affinities over the union of those candidates and
takes a softmax-weighted average of their labels.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion

from .data.pnm import write_gray
from .data.synthetic import SyntheticClip


@dataclass(frozen=True)
class PropagationConfig:
    m: int = 4  # context frames kept besides the first one
    r: int = 5  # radius in nodes
    k: int = 10
    tau: float = 0.05

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("context length m must be >= 0")
        if self.r < 1:
            raise ValueError("radius r must be >= 1")
        if self.k < 1:
            raise ValueError("top-k must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


PRESETS = {
    "pose": PropagationConfig(m=7, r=10, k=10),
    "face": PropagationConfig(m=4, r=5, k=10),
    "vos": PropagationConfig(m=20, r=18, k=10),
}


def _as_grid(f) -> np.ndarray:
    v = getattr(f, "values", f)
    v = getattr(v, "data", v)
    return np.asarray(v, dtype=np.float64)


def radius_mask(shape: Tuple[int, int], r: int) -> np.ndarray:
    """``[N, N]`` bool, True where two nodes lie within Chebyshev distance ``r``."""
    H, W = shape
    ys, xs = np.divmod(np.arange(H * W), W)
    return (np.abs(ys[:, None] - ys[None]) <= r) & (np.abs(xs[:, None] - xs[None]) <= r)


def context_frames(t: int, m: int) -> List[int]:
    """Source frames for target ``t``: most recent first, the first frame last."""
    recent = [s for s in range(t - 1, max(0, t - m) - 1, -1) if s > 0]
    return recent + [0]


def propagate_step(target: np.ndarray, sources: Sequence[np.ndarray], labels: Sequence[np.ndarray],
                   config: PropagationConfig, near: Optional[np.ndarray] = None) -> np.ndarray:
    """Labels of one target frame from a list of (features, labels) sources.

    Sources are given in priority order; equal affinities keep the earlier
    source and then the lower row-major node index.
    """
    H, W, C = target.shape
    N = H * W
    if near is None:
        near = radius_mask((H, W), config.r)
    tq = target.reshape(N, C)
    logits = np.concatenate([tq @ s.reshape(N, C).T for s in sources], axis=1) / config.tau
    allowed = np.tile(near, (1, len(sources)))
    src_labels = np.concatenate([l.reshape(N, -1) for l in labels], axis=0)

    logits = np.where(allowed, logits, -np.inf)
    k = min(config.k, int(allowed.sum(axis=1).min()))
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(logits, order, axis=1)
    w = np.exp(top - top[:, :1])
    w /= w.sum(axis=1, keepdims=True)
    out = np.einsum("nk,nkl->nl", w, src_labels[order])
    return out.reshape(H, W, -1)


def propagate(features: Sequence, init: np.ndarray, config: PropagationConfig) -> List[np.ndarray]:
    """Propagate ``init`` ``[H', W', L]`` through per-frame features ``[H', W', C]``."""
    feats = [_as_grid(f) for f in features]
    if not feats:
        raise ValueError("need at least one frame of features")
    init = np.asarray(init, dtype=np.float64)
    shape = feats[0].shape[:2]
    if init.shape[:2] != shape or any(f.shape != feats[0].shape for f in feats):
        raise ValueError(f"grid mismatch: labels {init.shape[:2]}, features {[f.shape for f in feats]}")
    near = radius_mask(shape, config.r)
    preds = [init]
    for t in range(1, len(feats)):
        ctx = context_frames(t, config.m)
        preds.append(propagate_step(feats[t], [feats[s] for s in ctx], [preds[s] for s in ctx],
                                    config, near))
    return preds


def dense_propagate(features: Sequence, init: np.ndarray, tau: float) -> List[np.ndarray]:
    """Full softmax attention from the first frame only (reference path)."""
    feats = [_as_grid(f) for f in features]
    H, W, C = feats[0].shape
    src = feats[0].reshape(-1, C)
    lab = np.asarray(init, dtype=np.float64).reshape(H * W, -1)
    out = [np.asarray(init, dtype=np.float64)]
    for f in feats[1:]:
        z = f.reshape(-1, C) @ src.T / tau
        z -= z.max(axis=1, keepdims=True)
        a = np.exp(z)
        a /= a.sum(axis=1, keepdims=True)
        out.append((a @ lab).reshape(H, W, -1))
    return out


def identity_baseline(init: np.ndarray, T: int) -> List[np.ndarray]:
    return [np.array(init, dtype=np.float64, copy=True) for _ in range(T)]


# -- ground truth on the node grid ------------------------------------------


@dataclass
class NodeGeometry:
    """Pixel position of node centres: ``pixel = offset + spacing * node``."""

    grid: Tuple[int, int]
    offset: Tuple[float, float]  # (x, y)
    spacing: float

    @classmethod
    def from_centres(cls, cy: np.ndarray, cx: np.ndarray) -> "NodeGeometry":
        spacing = float(cx[1] - cx[0]) if len(cx) > 1 else 1.0
        return cls((len(cy), len(cx)), (float(cx[0]), float(cy[0])), spacing)

    def pixels(self) -> np.ndarray:
        """``[H', W', 2]`` pixel (x, y) of every node centre."""
        H, W = self.grid
        ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
        return np.stack([self.offset[0] + self.spacing * xs, self.offset[1] + self.spacing * ys], -1)

    def to_nodes(self, px: np.ndarray) -> np.ndarray:
        return (px - np.asarray(self.offset)) / self.spacing


def _pixel_index(p: np.ndarray, H: int, W: int) -> Tuple[np.ndarray, np.ndarray]:
    ix = np.clip(np.round(p[..., 0]).astype(int), 0, W - 1)
    iy = np.clip(np.round(p[..., 1]).astype(int), 0, H - 1)
    return iy, ix


def keypoint_tracks(clip: SyntheticClip, geom: NodeGeometry):
    """Ground-truth node-unit positions ``[T, K, 2]`` and visibility ``[T, K]`` of node keypoints.

    Every frame-one node is a keypoint. Its mapped location is the flow at the
    nearest pixel plus the sub-pixel offset of the node centre.
    """
    T, H, W = clip.visible.shape
    px = geom.pixels().reshape(-1, 2)
    iy, ix = _pixel_index(px, H, W)
    frac = px - np.stack([ix, iy], -1)
    pos = clip.flow[:, iy, ix] + frac[None]
    vis = clip.visible[:, iy, ix]
    return geom.to_nodes(pos), vis


def keypoint_init(grid: Tuple[int, int]) -> np.ndarray:
    """One keypoint channel per node, one-hot at that node."""
    n = grid[0] * grid[1]
    return np.eye(n).reshape(grid[0], grid[1], n)


def predicted_points(pred: np.ndarray) -> np.ndarray:
    """Argmax node ``(x, y)`` of every channel of ``[H', W', K]``."""
    H, W, K = pred.shape
    flat = np.argmax(pred.reshape(H * W, K), axis=0)
    y, x = np.divmod(flat, W)
    return np.stack([x, y], -1).astype(np.float64)


def score_matches(pred: Sequence[np.ndarray], clip: SyntheticClip, alpha: float,
                  geom: NodeGeometry, per_frame: bool = False):
    """Fraction of visible keypoints predicted within ``alpha * max(H', W')`` nodes.

    Frame one and frames without visible points are skipped. Returns the mean
    of per-frame rates, or a ``{t: rate}`` dict when ``per_frame`` is set.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    gt, vis = keypoint_tracks(clip, geom)
    thr = alpha * max(geom.grid)
    rates: Dict[int, float] = {}
    for t in range(1, len(pred)):
        v = vis[t]
        if not v.any():
            continue
        d = np.linalg.norm(predicted_points(pred[t]) - gt[t], axis=-1)
        rates[t] = float(np.mean(d[v] <= thr))
    if per_frame:
        return rates
    return float(np.mean(list(rates.values()))) if rates else float("nan")


def random_guess_rate(grid: Tuple[int, int], alpha: float, n: int = 200000, seed: int = 0) -> float:
    """Monte Carlo match rate of uniformly random node predictions."""
    rng = np.random.default_rng(seed)
    H, W = grid
    thr = alpha * max(H, W)
    gt = rng.uniform([-0.5, -0.5], [W - 0.5, H - 0.5], size=(n, 2))
    guess = np.stack([rng.integers(0, W, n), rng.integers(0, H, n)], -1)
    return float(np.mean(np.linalg.norm(guess - gt, axis=-1) <= thr))


# -- regions -------------------------------------------------------------------


def _boundary(mask: np.ndarray) -> np.ndarray:
    return mask & ~binary_erosion(mask, border_value=0)


def score_region(pred_mask: np.ndarray, gt_mask: np.ndarray, tolerance: int = 1) -> Tuple[float, float]:
    """Jaccard index and boundary F-measure with a ``tolerance``-node match radius."""
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    J = 1.0 if union == 0 else float(np.logical_and(p, g).sum() / union)

    bp, bg = _boundary(p), _boundary(g)
    if not bp.any() and not bg.any():
        return J, 1.0
    if not bp.any() or not bg.any():
        return J, 0.0
    struct = np.ones((2 * tolerance + 1,) * 2, dtype=bool)
    precision = (bp & binary_dilation(bg, struct)).sum() / bp.sum()
    recall = (bg & binary_dilation(bp, struct)).sum() / bg.sum()
    if precision + recall == 0:
        return J, 0.0
    return J, float(2 * precision * recall / (precision + recall))


def node_ids(clip: SyntheticClip, geom: NodeGeometry) -> np.ndarray:
    """Object ids ``[T, H', W']`` read at node centres."""
    _, H, W = clip.ids.shape
    iy, ix = _pixel_index(geom.pixels(), H, W)
    return clip.ids[:, iy, ix]


def segmentation_init(ids0: np.ndarray, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[ids0]


def score_segmentation(pred: Sequence[np.ndarray], gt_ids: np.ndarray) -> Dict[int, Tuple[float, float]]:
    """Per-frame mean (J, F) over foreground objects present in frame one."""
    objs = [o for o in np.unique(gt_ids[0]) if o != 0]
    out = {}
    for t in range(1, len(pred)):
        lab = np.argmax(pred[t], axis=-1)
        scores = [score_region(lab == o, gt_ids[t] == o) for o in objs]
        if scores:
            out[t] = tuple(np.mean(scores, axis=0))
    return out


# -- export --------------------------------------------------------------------


def export_predictions(pred: Sequence[np.ndarray], out_dir: os.PathLike, clip_id: str,
                       scores: Sequence[Tuple[int, str, float]]) -> Path:
    """Write per-frame argmax label maps as P5 files and a ``clip_id,t,metric,value`` CSV."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    for t, p in enumerate(pred):
        lab = np.argmax(p, axis=-1)
        write_gray(np.clip(lab, 0, 255).astype(np.uint8), d / f"{clip_id}_labels_{t:04d}.pgm")
    path = d / f"{clip_id}_scores.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "t", "metric", "value"])
        for t, metric, value in scores:
            w.writerow([clip_id, t, metric, f"{value:.6f}"])
    return path
