"""Figures written next to the CSV outputs (Agg backend, PNG files)."""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path: os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def read_metrics(path: os.PathLike):
    steps, losses = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
    return np.array(steps), np.array(losses)


def smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(y) < window:
        return np.asarray(y, dtype=np.float64)
    c = np.cumsum(np.insert(np.asarray(y, dtype=np.float64), 0, 0.0))
    head = c[1:window] / np.arange(1, window)
    return np.concatenate([head, (c[window:] - c[:-window]) / window])


def loss_curves(curves: Mapping[str, os.PathLike], path: os.PathLike, window: int = 25) -> Path:
    """Overlay of smoothed training losses, one line per metrics CSV."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for label, csv_path in curves.items():
            s, l = read_metrics(csv_path)
            ax.plot(s, smooth(l, window), label=label, lw=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel("cycle loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def bar_chart(values: Mapping[str, float], path: os.PathLike, ylabel: str,
              errors: Optional[Mapping[str, float]] = None, reference: Optional[float] = None) -> Path:
    labels = list(values)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.8 * len(labels) + 1), 3))
        err = [errors.get(k, 0.0) for k in labels] if errors else None
        ax.bar(range(len(labels)), [values[k] for k in labels], yerr=err, color="0.55", capsize=3)
        if reference is not None:
            ax.axhline(reference, color="k", lw=0.8, ls="--")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylabel(ylabel)
        return _save(fig, path)


def per_frame_curve(rows: Sequence, metric: str, path: os.PathLike) -> Path:
    """Mean metric value against frame index from ``(clip, frame, metric, value)`` rows."""
    by_t: Dict[int, List[float]] = {}
    for _, t, m, v in rows:
        if m == metric:
            by_t.setdefault(int(t), []).append(float(v))
    ts = sorted(by_t)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(ts, [np.mean(by_t[t]) for t in ts], marker="o", ms=3)
        ax.set_xlabel("frame")
        ax.set_ylabel(metric)
        ax.set_ylim(0, 1.02)
        return _save(fig, path)


def image_grid(images: Sequence[np.ndarray], titles: Sequence[str], path: os.PathLike,
               cmap: str = "viridis") -> Path:
    """Row of images; ``[3, H, W]`` arrays are shown as RGB, 2-D arrays with ``cmap``."""
    n = len(images)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4), squeeze=False)
        for ax, img, title in zip(axes[0], images, titles):
            img = np.asarray(img)
            if img.ndim == 3:
                ax.imshow(np.clip(img.transpose(1, 2, 0), 0, 1), interpolation="nearest")
            else:
                ax.imshow(img, cmap=cmap, interpolation="nearest")
            ax.set_title(title)
            ax.axis("off")
        return _save(fig, path)
