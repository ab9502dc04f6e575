"""Shortcut diagnostics: affinity diagonality, a linear position probe and PCA colouring."""

from __future__ import annotations

import csv
import dataclasses
import os
import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .data.pnm import write_frame, write_gray


def diagonality(A: np.ndarray) -> float:
    """Mean diagonal mass of a (row-stochastic) square matrix."""
    A = np.asarray(getattr(A, "data", A))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"diagonality needs a square matrix, got {A.shape}")
    return float(np.mean(np.diag(A)))


def transition(src: np.ndarray, dst: np.ndarray, tau: float = 0.05) -> np.ndarray:
    """Plain-array affinity ``softmax_j(<src_i, dst_j> / tau)`` between two node grids."""
    C = src.shape[-1]
    z = src.reshape(-1, C) @ dst.reshape(-1, C).T / tau
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def node_coordinates(grid: Tuple[int, int]) -> np.ndarray:
    """Normalized ``(x, y)`` in [-1, 1] for every node, ``[H*W, 2]``."""
    H, W = grid
    ys = np.linspace(-1, 1, H) if H > 1 else np.zeros(1)
    xs = np.linspace(-1, 1, W) if W > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def ridge_fit(X: np.ndarray, Y: np.ndarray, lam: float):
    """Centred ridge regression through the SVD; returns ``(coef, intercept)``."""
    if not lam > 0:
        raise ValueError(f"ridge lambda must be positive, got {lam}")
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    U, s, Vt = np.linalg.svd(X - xm, full_matrices=False)
    coef = Vt.T @ ((s / (s * s + lam))[:, None] * (U.T @ (Y - ym)))
    return coef, ym - xm @ coef


def r_squared(y: np.ndarray, pred: np.ndarray) -> np.ndarray:
    ss_res = ((y - pred) ** 2).sum(axis=0)
    ss_tot = ((y - y.mean(axis=0)) ** 2).sum(axis=0)
    return 1.0 - ss_res / np.maximum(ss_tot, 1e-300)


def position_probe(features: Sequence[np.ndarray], lam: float = 1e-3) -> Tuple[float, float]:
    """Held-out R^2 of decoding node ``(x, y)`` from embeddings with a linear ridge probe.

    The first half of the maps trains the probe, the second half scores it.
    """
    maps = [np.asarray(getattr(f, "values", f)) for f in features]
    maps = [np.asarray(getattr(m, "data", m), dtype=np.float64) for m in maps]
    if len(maps) < 2:
        raise ValueError("position probe needs at least two feature maps")
    if not lam > 0:
        raise ValueError(f"ridge lambda must be positive, got {lam}")
    half = len(maps) // 2
    coords = node_coordinates(maps[0].shape[:2])
    C = maps[0].shape[-1]

    def stack(ms):
        return np.concatenate([m.reshape(-1, C) for m in ms]), np.tile(coords, (len(ms), 1))

    Xtr, Ytr = stack(maps[:half])
    Xte, Yte = stack(maps[half:])
    coef, b = ridge_fit(Xtr, Ytr, lam)
    r2 = r_squared(Yte, Xte @ coef + b)
    return float(r2[0]), float(r2[1])


def pca_rgb(feature: np.ndarray) -> np.ndarray:
    """Project nodes onto the top three principal components; ``[3, H, W]`` in [0, 1].

    Each component's sign is fixed so its largest-magnitude loading is
    positive. Missing components (rank below three) are zero with a warning.
    """
    F = np.asarray(getattr(feature, "values", feature))
    F = np.asarray(getattr(F, "data", F), dtype=np.float64)
    H, W, C = F.shape
    if C < 3:
        raise ValueError("pca_rgb needs at least three channels")
    X = F.reshape(-1, C)
    X = X - X.mean(axis=0)
    evals, evecs = np.linalg.eigh(X.T @ X / max(len(X) - 1, 1))
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    tol = max(evals[0], 0.0) * 1e-10 + 1e-300
    rank = int(np.sum(evals > tol))
    if rank < 3:
        warnings.warn(f"feature covariance has rank {rank} < 3; padding with zeros", RuntimeWarning)
    out = np.zeros((3, H * W))
    for c in range(min(rank, 3)):
        v = evecs[:, c]
        v = v * np.sign(v[np.argmax(np.abs(v))])
        p = X @ v
        span = p.max() - p.min()
        out[c] = (p - p.min()) / span if span > 0 else 0.0
    return out.reshape(3, H, W)


def principal_components(feature: np.ndarray, n: int = 3) -> np.ndarray:
    """Top-``n`` covariance eigenvectors as columns (sign-normalized like :func:`pca_rgb`)."""
    F = np.asarray(feature, dtype=np.float64)
    X = F.reshape(-1, F.shape[-1])
    X = X - X.mean(axis=0)
    evals, evecs = np.linalg.eigh(X.T @ X / max(len(X) - 1, 1))
    vecs = evecs[:, np.argsort(evals)[::-1][:n]]
    return vecs * np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])])


# -- pair report ---------------------------------------------------------------


@dataclass
class DiagnosticReport:
    diag_adjacent: float
    diag_unrelated: float
    probe_r2_x: float
    probe_r2_y: float
    n_adjacent: int
    n_unrelated: int
    n_probe_maps: int

    @property
    def probe_r2(self) -> float:
        return 0.5 * (self.probe_r2_x + self.probe_r2_y)

    def write_csv(self, path: os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for f in dataclasses.fields(self):
                w.writerow([f.name, repr(getattr(self, f.name))])

    @classmethod
    def read_csv(cls, path: os.PathLike) -> "DiagnosticReport":
        with open(path, newline="") as fh:
            vals = {r["metric"]: r["value"] for r in csv.DictReader(fh)}
        kw = {}
        for f in dataclasses.fields(cls):
            kw[f.name] = int(vals[f.name]) if f.type in (int, "int") else float(vals[f.name])
        return cls(**kw)


Pair = Tuple[np.ndarray, np.ndarray, str]  # frame a [3,H,W], frame b, "adjacent" | "unrelated"


def make_pairs(clips, rng: np.random.Generator, per_clip: int = 2) -> List[Pair]:
    """Adjacent pairs ``(I_t, I_t+1)`` and unrelated pairs from two different clips."""
    pairs: List[Pair] = []
    n = len(clips)
    for i, clip in enumerate(clips):
        for _ in range(per_clip):
            t = int(rng.integers(0, clip.T - 1))
            pairs.append((clip.frames[t], clip.frames[t + 1], "adjacent"))
            if n > 1:
                j = (i + 1 + int(rng.integers(0, n - 1))) % n
                s = int(rng.integers(0, clips[j].T))
                pairs.append((clip.frames[t], clips[j].frames[s], "unrelated"))
    return pairs


def affinity_pair_report(model: Callable[[np.ndarray], np.ndarray], pairs: Sequence[Pair],
                         probe_maps: Optional[Sequence[np.ndarray]] = None, tau: float = 0.05,
                         lam: float = 1e-3) -> DiagnosticReport:
    """Mean diagonality per pair class, plus the position probe on ``probe_maps``.

    ``model`` maps frames ``[N, 3, H, W]`` to node features ``[N, H', W', C]``.
    Without ``probe_maps`` the probe runs on the features of the pairs' first frames.
    """
    diags = {"adjacent": [], "unrelated": []}
    firsts = []
    for a, b, kind in pairs:
        if kind not in diags:
            raise ValueError(f"unknown pair kind {kind!r}")
        fa, fb = model(np.stack([a, b]))
        diags[kind].append(diagonality(transition(fa, fb, tau)))
        firsts.append(fa)
    maps = list(probe_maps) if probe_maps is not None else firsts
    r2x, r2y = position_probe(maps, lam) if len(maps) >= 2 else (float("nan"), float("nan"))
    mean = lambda v: float(np.mean(v)) if v else float("nan")  # noqa: E731
    return DiagnosticReport(mean(diags["adjacent"]), mean(diags["unrelated"]), r2x, r2y,
                            len(diags["adjacent"]), len(diags["unrelated"]), len(maps))


def write_affinity_image(A: np.ndarray, path: os.PathLike) -> None:
    A = np.asarray(A, dtype=np.float64)
    top = A.max()
    write_gray(A / top if top > 0 else A, path)


def write_pca_image(feature: np.ndarray, path: os.PathLike) -> None:
    write_frame(pca_rgb(feature), path)
