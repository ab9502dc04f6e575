"""Command-line entry point: ``cw3 {gen-data,train,eval,diagnose,plot-data,reproduce}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .autodiff import FormatError, Tensor
from .checkpoint import load_checkpoint
from .config import TrainConfig, load_config, parse_overrides
from .data.clipio import load_clip, read_manifest, save_clip, write_manifest
from .data.synthetic import ClipConfig, generate_clip
from .propagation import PropagationConfig

log = logging.getLogger("cw3")

# argparse dests that are also TrainConfig fields
_TRAIN_FLAGS = ("seed", "method", "padding", "gamma_lo", "gamma_hi", "tau", "cycle_len", "batch", "lr",
                "steps", "color_aug")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=["vanilla_fc3", "stfc3"])
    p.add_argument("--padding", choices=["zero", "replicate", "reflect", "none"])
    p.add_argument("--gamma-lo", type=float)
    p.add_argument("--gamma-hi", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--cycle-len", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--color-aug", choices=["on", "off"])


def _add_prop_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--m", type=int, default=None, help="context frames")
    p.add_argument("--r", type=int, default=None, help="radius in nodes")
    p.add_argument("--k", type=int, default=None, help="top-k neighbours")
    p.add_argument("--tau", type=float, default=None, help="propagation temperature")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--features", choices=["head", "backbone"], default=None)


def train_config_from_args(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    raw = {k: getattr(args, k) for k in _TRAIN_FLAGS if getattr(args, k, None) is not None}
    return cfg.replace(**parse_overrides(raw))


def prop_config_from_args(args) -> PropagationConfig:
    from .experiments import BENCHMARK
    base = BENCHMARK.propagation
    return PropagationConfig(m=base.m if args.m is None else args.m,
                             r=base.r if args.r is None else args.r,
                             k=base.k if args.k is None else args.k,
                             tau=base.tau if args.tau is None else args.tau)


def _load_clips(manifest: Path):
    paths = read_manifest(manifest)
    return [load_clip(p) for p in paths], [Path(p).name for p in paths]


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .experiments import BENCHMARK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = BENCHMARK.clip
    cc = ClipConfig(T=args.frames or base.T, height=args.size or base.height, width=args.size or base.width,
                    num_sprites=base.num_sprites if args.sprites is None else args.sprites,
                    motion=base.motion if args.motion is None else args.motion,
                    camera_ratio=base.camera_ratio)
    rel = []
    for i in range(args.count):
        name = f"clip_{i:05d}"
        save_clip(generate_clip(args.seed + i, cc), out / name)
        rel.append(name)
    write_manifest(rel, out / "manifest.txt")
    log.info("wrote %d clips to %s", args.count, out)
    return 0


def cmd_train(args) -> int:
    from .train import state_from_checkpoint, train
    cfg = train_config_from_args(args)
    clips, _ = _load_clips(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    state = None
    if args.resume:
        state = state_from_checkpoint(load_checkpoint(args.resume), cfg)
    ckpt = Path(args.ckpt) if args.ckpt else out / "model.ckpt"
    every = max(1, cfg.steps // 20)

    def report(step, loss):
        if step % every == 0:
            log.info("step %d loss %.4f", step, loss)

    train(cfg, clips, state=state, metrics_path=out / "metrics.csv", ckpt_path=ckpt,
          deterministic=args.deterministic, on_step=report)
    from .plotting import loss_curves
    loss_curves({cfg.method: out / "metrics.csv"}, out / "loss.png")
    log.info("checkpoint written to %s", ckpt)
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate
    from .experiments import BENCHMARK
    from .plotting import bar_chart, per_frame_curve
    ckpt = load_checkpoint(args.ckpt)
    enc = ckpt.config.encoder_config()
    weights = {k: Tensor(v) for k, v in ckpt.weights.items()}
    clips, names = _load_clips(args.data)
    prop = prop_config_from_args(args)
    feats = args.features or BENCHMARK.features
    res = evaluate(weights, enc, clips, prop, args.alpha, features=feats, names=names)
    base = evaluate(None, enc, clips, prop, args.alpha, names=names, identity=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.write_csv(out / "eval.csv")
    base.write_csv(out / "eval_identity.csv")
    means, bmeans = res.means(), base.means()
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "metric", "value"])
        for m, v in means.items():
            w.writerow(["checkpoint", m, repr(v)])
        for m, v in bmeans.items():
            w.writerow(["identity", m, repr(v)])
    bar_chart({f"model {m}": means[m] for m in means} | {f"identity {m}": bmeans[m] for m in bmeans},
              out / "summary.png", "score")
    per_frame_curve(res.rows, "match", out / "match_per_frame.png")
    print(json.dumps({"checkpoint": means, "identity": bmeans}, indent=2))
    return 0


def cmd_diagnose(args) -> int:
    from .diagnostics import (affinity_pair_report, make_pairs, pca_rgb, transition,
                              write_affinity_image, write_pca_image)
    from .evaluate import clip_features
    from .experiments import BENCHMARK
    from .plotting import image_grid
    ckpt = load_checkpoint(args.ckpt)
    enc = ckpt.config.encoder_config()
    weights = {k: Tensor(v) for k, v in ckpt.weights.items()}
    clips, _ = _load_clips(args.data)
    feats = args.features or BENCHMARK.features

    def model(x):
        return clip_features(weights, enc, x, feats)

    rng = np.random.default_rng(ckpt.config.seed)
    pairs = make_pairs(clips, rng)
    probe = [model(c.frames[:1])[0] for c in clips]
    report = affinity_pair_report(model, pairs, probe, tau=ckpt.config.tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")

    c0 = clips[0]
    f = model(c0.frames[:2])
    other = model(clips[1 % len(clips)].frames[-1:])[0]
    a_adj, a_unrel = transition(f[0], f[1], ckpt.config.tau), transition(f[0], other, ckpt.config.tau)
    write_pca_image(f[0], out / "pca.ppm")
    write_affinity_image(a_adj, out / "affinity_adjacent.pgm")
    write_affinity_image(a_unrel, out / "affinity_unrelated.pgm")
    image_grid([c0.frames[0], pca_rgb(f[0])], ["frame", "PCA"], out / "pca.png")
    image_grid([a_adj, a_unrel], ["adjacent pair", "unrelated pair"], out / "affinity.png")
    print(json.dumps(report.__dict__, indent=2))
    return 0


def cmd_plot_data(args) -> int:
    """Collect metrics/eval CSVs into plot-ready tables plus matching figures."""
    from .evaluate import read_eval_csv
    from .plotting import loss_curves, per_frame_curve, read_metrics, smooth
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves = {}
    for p in args.metrics or []:
        p = Path(p)
        label = p.parent.name or p.stem
        curves[label] = p
        s, l = read_metrics(p)
        with open(out / f"loss_{label}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "loss_smoothed"])
            for a, b, c in zip(s, l, smooth(l, args.window)):
                w.writerow([a, repr(float(b)), repr(float(c))])
    if curves:
        loss_curves(curves, out / "loss_curves.png", args.window)
    for p in args.eval or []:
        p = Path(p)
        res = read_eval_csv(p)
        label = p.parent.name or p.stem
        by = {}
        for _, t, m, v in res.rows:
            by.setdefault((t, m), []).append(v)
        with open(out / f"per_frame_{label}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "metric", "mean", "count"])
            for (t, m) in sorted(by):
                w.writerow([t, m, repr(float(np.mean(by[(t, m)]))), len(by[(t, m)])])
        per_frame_curve(res.rows, "match", out / f"per_frame_{label}.png")
    return 0


def cmd_reproduce(args) -> int:
    from .experiments import run_family, summarize_family
    results = run_family(args.family, seeds=args.seeds, out_dir=Path(args.out),
                         cache=Path(args.cache) if args.cache else None)
    print(json.dumps(summarize_family(args.family, results), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cw3", description="Fully convolutional cycle-consistency toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic clips and a manifest")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--frames", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--sprites", type=int)
    g.add_argument("--motion", type=float)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train an encoder")
    _add_train_flags(t)
    t.add_argument("--data", type=Path, required=True, help="clip manifest")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--ckpt", type=Path, help="checkpoint output path (default OUT/model.ckpt)")
    t.add_argument("--resume", type=Path, help="continue from this checkpoint")
    t.add_argument("--deterministic", action="store_true", help="serial, bit-reproducible run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="label propagation scores for a checkpoint")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    _add_prop_flags(e)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", help="diagonality, position probe and PCA exports")
    d.add_argument("--ckpt", type=Path, required=True)
    d.add_argument("--data", type=Path, required=True)
    d.add_argument("--out", type=Path, required=True)
    d.add_argument("--features", choices=["head", "backbone"])
    d.set_defaults(func=cmd_diagnose)

    pl = sub.add_parser("plot-data", help="plot-ready CSVs and figures from run outputs")
    pl.add_argument("--metrics", nargs="*", help="metrics.csv files")
    pl.add_argument("--eval", nargs="*", help="eval.csv files")
    pl.add_argument("--window", type=int, default=25)
    pl.add_argument("--out", type=Path, required=True)
    pl.set_defaults(func=cmd_plot_data)

    r = sub.add_parser("reproduce", help="run an experiment family (cached)")
    r.add_argument("family", choices=["shortcut", "padding", "gamma"])
    r.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--cache", type=Path)
    r.set_defaults(func=cmd_reproduce)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FormatError, ValueError, OSError) as e:
        if args.verbose:
            raise
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
