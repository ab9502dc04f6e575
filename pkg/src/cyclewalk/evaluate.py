"""Held-out evaluation: encode clips, propagate first-frame labels, score them."""

from __future__ import annotations

import csv
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, no_grad
from .data.synthetic import SyntheticClip
from .encoder import EncoderConfig, encode, node_centres
from .propagation import (
    NodeGeometry,
    PropagationConfig,
    identity_baseline,
    keypoint_init,
    node_ids,
    propagate,
    score_matches,
    score_segmentation,
    segmentation_init,
)

METRICS = ("match", "J", "F")


def node_geometry(config: EncoderConfig, height: int, width: int) -> NodeGeometry:
    return NodeGeometry.from_centres(node_centres(config, height), node_centres(config, width))


def clip_features(weights, config: EncoderConfig, frames: np.ndarray, features: str = "backbone",
                  chunk: int = 16) -> np.ndarray:
    """Unit-norm node features ``[T, H', W', C]`` (no tape)."""
    dtype = next(iter(weights.values())).data.dtype
    out = []
    with no_grad():
        for s in range(0, len(frames), chunk):
            x = Tensor(np.asarray(frames[s:s + chunk], dtype=dtype))
            out.append(encode(x, weights, config, features=features).data)
    return np.concatenate(out).astype(np.float64)


def score_clip(preds_kp: Sequence[np.ndarray], preds_seg: Sequence[np.ndarray], clip: SyntheticClip,
               geom: NodeGeometry, alpha: float) -> List[Tuple[int, str, float]]:
    rows = [(t, "match", v) for t, v in score_matches(preds_kp, clip, alpha, geom, per_frame=True).items()]
    for t, (J, F) in score_segmentation(preds_seg, node_ids(clip, geom)).items():
        rows += [(t, "J", J), (t, "F", F)]
    return sorted(rows, key=lambda r: (r[0], METRICS.index(r[1])))


def propagate_clip(feats: np.ndarray, clip: SyntheticClip, geom: NodeGeometry,
                   prop: PropagationConfig, identity: bool = False):
    kp0 = keypoint_init(geom.grid)
    ids0 = node_ids(clip, geom)[0]
    seg0 = segmentation_init(ids0, int(clip.ids.max()) + 1)
    if identity:
        return identity_baseline(kp0, clip.T), identity_baseline(seg0, clip.T)
    return propagate(feats, kp0, prop), propagate(feats, seg0, prop)


@dataclass
class EvalResult:
    rows: List[Tuple[str, int, str, float]] = field(default_factory=list)  # clip, frame, metric, value

    def clip_means(self) -> Dict[Tuple[str, str], float]:
        acc = defaultdict(list)
        for clip, _, metric, value in self.rows:
            acc[(clip, metric)].append(value)
        return {k: float(np.mean(v)) for k, v in acc.items()}

    def means(self) -> Dict[str, float]:
        """Mean over clips of per-clip means, per metric."""
        acc = defaultdict(list)
        for (_, metric), v in self.clip_means().items():
            acc[metric].append(v)
        return {m: float(np.mean(acc[m])) if acc[m] else math.nan for m in METRICS}

    def write_csv(self, path: os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["clip", "frame", "metric", "value"])
            for clip, frame, metric, value in self.rows:
                w.writerow([clip, frame, metric, repr(float(value))])


def read_eval_csv(path: os.PathLike) -> EvalResult:
    res = EvalResult()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            res.rows.append((row["clip"], int(row["frame"]), row["metric"], float(row["value"])))
    return res


def evaluate(weights, config: EncoderConfig, clips: Sequence[SyntheticClip], prop: PropagationConfig,
             alpha: float = 0.1, features: str = "backbone", names: Optional[Sequence[str]] = None,
             identity: bool = False) -> EvalResult:
    """Propagate and score every clip; ``identity`` scores the copy-first-frame baseline."""
    names = list(names) if names is not None else [f"clip{i:04d}" for i in range(len(clips))]
    res = EvalResult()
    for name, clip in zip(names, clips):
        H, W = clip.frames.shape[-2:]
        geom = node_geometry(config, H, W)
        feats = None if identity else clip_features(weights, config, clip.frames, features)
        kp, seg = propagate_clip(feats, clip, geom, prop, identity=identity)
        for t, metric, value in score_clip(kp, seg, clip, geom, alpha):
            res.rows.append((name, t, metric, value))
    return res
