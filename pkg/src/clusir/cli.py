"""Command-line front end.

Exit codes: 0 success, 1 parameter error, 2 numerical error (including
training divergence).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import diagnostics as diag
from .degradations import (LABELS, load_paired_folder, make_dataset, procedural_images, read_png,
                           save_paired_folder)
from .errors import NumericalError, ParameterError, ShapeError, StateError, TrainingError
from .model import load_checkpoint
from .training import (CLUSTER_ROWS, COMPONENT_ROWS, INIT_ROWS, evaluate, format_table, load_train_config,
                       run_ablation, train, validation_set)

log = logging.getLogger("clusir")


def _json_arg(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParameterError(f"not valid JSON: {text!r}") from exc


def _load_samples(args, tasks=None):
    if args.data:
        return load_paired_folder(args.data, tasks)
    return validation_set(tasks or ("noise", "rain", "haze"), args.per_task, args.size, seed=args.seed)


def cmd_synth(args):
    clean = procedural_images(args.images, args.clean_size, seed=args.seed)
    mix = {t: args.images for t in args.tasks}
    expansion = _json_arg(args.expansion) if args.expansion else {}
    n = save_paired_folder(make_dataset(clean, mix, expansion, args.patch, args.seed), args.out)
    print(f"wrote {n} samples to {args.out}")


def cmd_train(args):
    overrides = {"seed": args.seed, "lr": args.lr, "batch": args.batch, "epochs": args.epochs,
                 "steps_per_epoch": args.steps_per_epoch, "lr_halve_epoch": args.lr_halve_epoch,
                 "patch": args.patch, "loss_lambda": args.loss_lambda}
    if args.tasks:
        overrides["tasks"] = args.tasks
    if args.ablation:
        overrides["ablation"] = _json_arg(args.ablation)
    if args.model:
        overrides["model"] = _json_arg(args.model)
    cfg = load_train_config(args.config, overrides)
    res = train(cfg, out_dir=args.out, resume=args.resume, max_steps=args.max_steps)
    for r in res.metrics:
        if r.step == res.step:
            print(f"{r.task:>9}  psnr {r.psnr:6.2f}  ssim {r.ssim:.4f}")
    print(f"checkpoint: {res.checkpoint}")


def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    samples = _load_samples(args, args.tasks)
    records, baseline = evaluate(model, samples)
    rows = []
    for r in records:
        p0, s0 = baseline[r.task]
        rows.append({"task": r.task, "psnr": r.psnr, "ssim": r.ssim, "input_psnr": p0, "input_ssim": s0})
        print(f"{r.task:>9}  psnr {r.psnr:6.2f} (input {p0:6.2f})  ssim {r.ssim:.4f} (input {s0:.4f})")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(rows, indent=2))


def cmd_ablate(args):
    cfg = load_train_config(args.config, {"seed": args.seed, "epochs": args.epochs,
                                          "steps_per_epoch": args.steps_per_epoch})
    matrix = {"components": COMPONENT_ROWS, "clusters": CLUSTER_ROWS, "init": INIT_ROWS}[args.matrix]
    rows = run_ablation(cfg, matrix, out_dir=args.out, max_steps=args.max_steps)
    print(format_table(rows))


def cmd_diagnose(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _ = load_checkpoint(args.checkpoint)
    torch.manual_seed(args.seed)
    if args.what == "stats":
        traces = diag.collect_traces(model, _load_samples(args, args.tasks))
        diag.write_traces(traces, out / "routing_traces.jsonl")
        stats = diag.routing_stats(traces)
        diag.write_stats_csv(stats, out / "routing_stats.csv")
        for stage, s in stats.items():
            print(f"stage {stage}: purity {s['purity']:.3f}  entropy {s['entropy_mean']:.4f}"
                  f"  argmax {s['argmax_histogram']}")
    elif args.what == "mse":
        mats = diag.plot_prototype_mse(model.prototype_banks(), out)
        for i, m in enumerate(mats, start=1):
            print(f"stage {i}: max off-diagonal mse {m.max():.5f}")
    elif args.what == "embed":
        samples = _load_samples(args, args.tasks)
        ids, labels, feats = diag.export_embeddings(model, samples, args.stage, out / f"embed_stage{args.stage}.csv")
        diag.plot_embedding(feats, labels, out / f"embed_stage{args.stage}_pca.png")
        print(f"separability ratio {diag.separability_ratio(feats, labels):.3f} over {len(ids)} samples")
    elif args.what in ("affinity", "spectrum"):
        if args.image:
            img = read_png(args.image)
        else:
            img = _load_samples(args, args.tasks)[0].degraded
        if args.what == "affinity":
            diag.affinity_map(img, model, args.stage, out)
        else:
            res = diag.spectrum_dump(img, model, args.level, out)
            print(json.dumps(res["high_band_fraction"], indent=2))
    print(f"outputs in {out}")


def build_parser():
    p = argparse.ArgumentParser(prog="clusir", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic paired dataset to disk")
    s.add_argument("--out", required=True)
    s.add_argument("--tasks", nargs="+", default=["noise", "rain", "haze"], choices=LABELS)
    s.add_argument("--images", type=int, default=8)
    s.add_argument("--clean-size", type=int, default=96)
    s.add_argument("--patch", type=int, default=64)
    s.add_argument("--expansion", help='JSON map, e.g. {"noise": 3}')
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model (JSON config file + flag overrides)")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps-per-epoch", type=int)
    t.add_argument("--lr-halve-epoch", type=int)
    t.add_argument("--patch", type=int)
    t.add_argument("--loss-lambda", type=float)
    t.add_argument("--tasks", nargs="+", choices=LABELS)
    t.add_argument("--ablation", help="JSON map of ablation flags")
    t.add_argument("--model", help="JSON map of model config fields")
    t.add_argument("--max-steps", type=int)
    t.set_defaults(func=cmd_train)

    def data_args(q):
        q.add_argument("--data", help="paired folder <root>/<task>/{degraded,clean}/*.png")
        q.add_argument("--tasks", nargs="+", choices=LABELS)
        q.add_argument("--per-task", type=int, default=8)
        q.add_argument("--size", type=int, default=64)
        q.add_argument("--seed", type=int, default=1000)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--out")
    data_args(e)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation matrix")
    a.add_argument("--matrix", choices=["components", "clusters", "init"], default="components",
                   help="module toggles, per-stage cluster counts, or prototype init")
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--epochs", type=int)
    a.add_argument("--steps-per-epoch", type=int)
    a.add_argument("--max-steps", type=int)
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("diagnose", help="routing and frequency diagnostics")
    d.add_argument("what", choices=["stats", "affinity", "mse", "embed", "spectrum"])
    d.add_argument("checkpoint")
    d.add_argument("--out", required=True)
    d.add_argument("--stage", type=int, default=1)
    d.add_argument("--level", type=int, default=1)
    d.add_argument("--image", help="PNG input for affinity/spectrum")
    data_args(d)
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; those are parameter errors here
        return 1 if exc.code == 2 else exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ParameterError, ShapeError, StateError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, TrainingError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        if isinstance(exc, TrainingError) and exc.checkpoint:
            print(f"last good checkpoint: {exc.checkpoint}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
