"""Benchmark definition and the experiment families (shortcut, padding, crop scale).

Each run trains one encoder on the default synthetic benchmark, then scores
held-out propagation and the shortcut diagnostics. Runs are deterministic
functions of (TrainConfig, Benchmark), so their summaries are cached as JSON
keyed by a hash of both; a cache hit returns the stored numbers without
retraining.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import TrainConfig
from .data.synthetic import ClipConfig, generate_clip
from .diagnostics import affinity_pair_report, make_pairs
from .evaluate import clip_features, evaluate
from .propagation import PropagationConfig

log = logging.getLogger(__name__)

# bump when a change alters training or scoring numerics
RESULTS_VERSION = 2


@dataclass(frozen=True)
class Benchmark:
    clip: ClipConfig = ClipConfig(motion=4.0, camera_ratio=1.0)
    train_seed: int = 0
    n_train: int = 200
    eval_seed: int = 100000
    n_eval: int = 20
    propagation: PropagationConfig = PropagationConfig(m=4, r=5, k=10)
    alpha: float = 0.1
    features: str = "backbone"  # pre-head block features at test time
    pairs_per_clip: int = 2

    def train_clips(self):
        return [generate_clip(self.train_seed + i, self.clip) for i in range(self.n_train)]

    def eval_clips(self):
        return [generate_clip(self.eval_seed + i, self.clip) for i in range(self.n_eval)]

    def key(self) -> str:
        return repr(self)


BENCHMARK = Benchmark()


def default_cache() -> Path:
    env = os.environ.get("CW3_CACHE")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "results" / "cache.json"


def run_key(config: TrainConfig, bench: Benchmark) -> str:
    text = f"v{RESULTS_VERSION}\n{config.to_text()}\n{bench.key()}"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:20]


def _load_cache(path: Path) -> Dict:
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    return {}


def _store(path: Path, key: str, entry: Dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    data = _load_cache(path)
    data[key] = entry
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(data, indent=1, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)


def _feature_scores(weights, config: TrainConfig, bench: Benchmark, clips, features: str) -> Dict[str, float]:
    enc = config.encoder_config()
    res = evaluate(weights, enc, clips, bench.propagation, bench.alpha, features=features).means()

    def model(x):
        return clip_features(weights, enc, x, features)

    pairs = make_pairs(clips, np.random.default_rng(bench.eval_seed), bench.pairs_per_clip)
    probe = [model(c.frames[:2])[k] for c in clips for k in range(2)]
    rep = affinity_pair_report(model, pairs, probe, tau=config.tau)
    return {"match": res["match"], "J": res["J"], "F": res["F"],
            "diag_adjacent": rep.diag_adjacent, "diag_unrelated": rep.diag_unrelated,
            "probe_r2": rep.probe_r2, "probe_r2_x": rep.probe_r2_x, "probe_r2_y": rep.probe_r2_y}


def score_weights(weights, config: TrainConfig, bench: Benchmark, eval_clips=None) -> Dict[str, float]:
    """Propagation scores, identity baseline and diagnostics for trained weights.

    Top-level scores use ``bench.features``; the other feature source is kept
    under ``alt_features`` for comparison.
    """
    clips = eval_clips if eval_clips is not None else bench.eval_clips()
    entry = _feature_scores(weights, config, bench, clips, bench.features)
    base = evaluate(None, config.encoder_config(), clips, bench.propagation, bench.alpha, identity=True).means()
    entry.update({"identity_match": base["match"], "identity_J": base["J"]})
    other = "head" if bench.features == "backbone" else "backbone"
    entry["alt_features"] = {"features": other, **_feature_scores(weights, config, bench, clips, other)}
    return entry


def run_experiment(config: TrainConfig, bench: Benchmark = BENCHMARK, cache: Optional[Path] = None,
                   out_dir: Optional[Path] = None, train_clips=None, eval_clips=None,
                   use_cache: bool = True) -> Dict:
    """Train + score one configuration, reusing a cached summary when present."""
    from .train import train
    cache = cache or default_cache()
    key = run_key(config, bench)
    if use_cache:
        hit = _load_cache(cache).get(key)
        if hit is not None:
            return hit
    t0, c0 = time.time(), time.process_time()
    clips = train_clips if train_clips is not None else bench.train_clips()
    metrics = ckpt = None
    if out_dir is not None:
        run_dir = Path(out_dir) / run_name(config)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(config.to_text(), encoding="utf-8")
        metrics, ckpt = run_dir / "metrics.csv", run_dir / "model.ckpt"
    state = train(config, clips, metrics_path=metrics, ckpt_path=ckpt, deterministic=True)
    entry = score_weights(state.weights, config, bench, eval_clips)
    entry.update({
        "method": config.method, "padding": config.padding, "gamma": [config.gamma_lo, config.gamma_hi],
        "seed": config.seed, "steps": config.steps,
        "final_loss": float(np.mean(state.losses[-100:])) if state.losses else float("nan"),
        "train_seconds": round(time.time() - t0, 1),
        "train_cpu_seconds": round(time.process_time() - c0, 1),
    })
    _store(cache, key, entry)
    log.info("%s: %s", run_name(config), entry)
    return entry


def run_name(config: TrainConfig) -> str:
    return f"{config.method}_{config.padding}_g{config.gamma_lo:g}-{config.gamma_hi:g}_s{config.seed}"


# -- families --------------------------------------------------------------------

BASE = TrainConfig()


def family_configs(family: str, seeds: Sequence[int] = (0, 1, 2)) -> Dict[str, List[TrainConfig]]:
    """Named arms of an experiment family, one config per seed."""
    def arm(**kw):
        return [BASE.replace(seed=s, **kw) for s in seeds]

    stfc3 = arm(method="stfc3", padding="zero")
    if family == "shortcut":
        return {"vanilla_zero": arm(method="vanilla_fc3", padding="zero"), "stfc3": stfc3}
    if family == "padding":
        arms = {f"vanilla_{p}": arm(method="vanilla_fc3", padding=p)
                for p in ("zero", "replicate", "reflect", "none")}
        arms["stfc3"] = stfc3
        return arms
    if family == "gamma":
        return {"gamma_0.75": arm(method="stfc3", gamma_lo=0.75), "gamma_0.08": stfc3}
    raise ValueError(f"unknown family {family!r}")


def run_family(family: str, seeds: Sequence[int] = (0, 1, 2), out_dir: Optional[Path] = None,
               cache: Optional[Path] = None, bench: Benchmark = BENCHMARK) -> Dict[str, List[Dict]]:
    arms = family_configs(family, seeds)
    train_clips = eval_clips = None
    cache = cache or default_cache()
    known = _load_cache(cache)
    if any(run_key(c, bench) not in known for cfgs in arms.values() for c in cfgs):
        train_clips, eval_clips = bench.train_clips(), bench.eval_clips()
    return {name: [run_experiment(c, bench, cache, out_dir, train_clips, eval_clips) for c in cfgs]
            for name, cfgs in arms.items()}


def summarize_family(family: str, results: Dict[str, List[Dict]]) -> Dict[str, Dict[str, float]]:
    keys = ("match", "J", "F", "identity_match", "diag_adjacent", "diag_unrelated", "probe_r2", "final_loss")
    return {name: {k: float(np.mean([r[k] for r in runs])) for k in keys} for name, runs in results.items()}
