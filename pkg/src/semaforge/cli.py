"""Command-line entry point.

Subcommands: generate, segment, train, eval, generalize, ablate, gradcheck.
Progress goes to stderr (level picked by SEMAFORGE_LOG=error|info|debug);
the primary machine-readable output path is printed to stdout. Exit codes:
0 success, 1 runtime failure (one-line ``error: ...`` on stderr), 2 usage.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .config import FAMILIES, RunConfig
from .errors import SemaforgeError
from .harness import (AblationPlan, ensure_dataset, evaluate, run_ablation,
                      run_generalization, train_model)
from .imgio import load_image, load_landmarks, save_gray, save_image, save_mask_pgm
from .model import DetectorModel
from .segmentation import FRAGMENTS, segment_image
from .synthetic import DatasetManifest, generate_dataset
from . import selfcheck

log = logging.getLogger("semaforge")


def _setup_logging():
    level_name = os.environ.get("SEMAFORGE_LOG", "info").lower()
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(level_name, logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)


def _add_common(p):
    p.add_argument("--config", help="JSON run-config file")
    p.add_argument("--seed", type=int, help="base random seed")
    p.add_argument("--out", help="output directory (default: runs)")
    p.add_argument("--jobs", type=int, help="parallel workers (1 = bit-deterministic)")
    p.add_argument("--fragment-size", type=int, help="fragment side length (default 64)")
    p.add_argument("--epochs", type=int, help="epochs for both training steps (default 15)")


def _resolve_config(args):
    """flags > config file > defaults; returns the merged RunConfig."""
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) \
        else RunConfig()
    ds, md, tr = cfg.dataset, cfg.model, cfg.train
    if getattr(args, "seed", None) is not None:
        ds = replace(ds, seed=args.seed)
        tr = replace(tr, seed=args.seed)
    if getattr(args, "fragment_size", None) is not None:
        md = replace(md, fragment_size=args.fragment_size)
    if getattr(args, "epochs", None) is not None:
        tr = replace(tr, epochs_fbranch=args.epochs, epochs_gbranch=args.epochs)
    if getattr(args, "jobs", None) is not None:
        tr = replace(tr, jobs=args.jobs)
    if getattr(args, "leave_out", None) is not None:
        ds = replace(ds, leave_out=args.leave_out)
    out_dir = getattr(args, "out", None) or cfg.out_dir
    cfg = RunConfig(dataset=ds, model=md, train=tr, out_dir=out_dir)
    log.info("resolved config hash=%s (flags > file > defaults)", cfg.hash())
    return cfg


def _run_dir(cfg):
    path = os.path.join(cfg.out_dir, f"run-{cfg.hash()}-s{cfg.train.seed}")
    os.makedirs(path, exist_ok=True)
    cfg.save(os.path.join(path, "config.json"))
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    cfg = _resolve_config(args)
    out_dir = os.path.join(cfg.out_dir, "dataset")
    os.makedirs(out_dir, exist_ok=True)
    log.info("generating dataset into %s", out_dir)
    manifest = generate_dataset(cfg.dataset, out_dir)
    log.info("wrote %d records", len(manifest.records))
    print(os.path.join(out_dir, "manifest.jsonl"))
    return 0


def cmd_segment(args):
    img = load_image(args.image)
    lm = load_landmarks(args.landmarks)
    size = args.fragment_size or 64
    out = args.out or "runs"
    masks, frags = segment_image(img, lm, size=size)
    os.makedirs(out, exist_ok=True)
    for key in FRAGMENTS:
        save_mask_pgm(os.path.join(out, f"mask_{key}.pgm"), masks[key])
        if args.fragment_format == "raw":
            frags[key].astype("<f8").tofile(
                os.path.join(out, f"fragment_{key}.f64"))
        else:
            save_image(os.path.join(out, f"fragment_{key}.png"), frags[key])
    for warning in masks.warnings:
        log.info("segment warning: %s", warning)
    print(out)
    return 0


def cmd_train(args):
    cfg = _resolve_config(args)
    run_dir = _run_dir(cfg)
    if args.data:
        manifest = DatasetManifest.load(os.path.join(args.data, "manifest.jsonl"))
    else:
        manifest = ensure_dataset(cfg.dataset, cfg.out_dir)
    log.info("training (step=%s) on %s", args.step, manifest.root)
    model = None
    if args.step == "2":
        if not args.model:
            raise SemaforgeError("--step 2 needs --model pointing at a step-1 checkpoint")
        model = DetectorModel.load(args.model)
    from .train import build_fragment_cache, train_two_step

    size = cfg.model.fragment_size
    cache_train = build_fragment_cache(manifest.split("train"), manifest.root, size)
    cache_val = build_fragment_cache(manifest.split("val"), manifest.root, size)
    if model is None:
        model = DetectorModel(cfg.model, seed=cfg.train.seed)
    metrics = train_two_step(model, cache_train, cache_val, cfg.train,
                             log=log.info, step=args.step)
    model_dir = os.path.join(run_dir, "model")
    model.save(model_dir)
    metrics_path = os.path.join(run_dir, "metrics.json")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, sort_keys=True, indent=2)
    log.info("model saved to %s", model_dir)
    print(metrics_path)
    return 0


def cmd_eval(args):
    cfg = _resolve_config(args)
    model = DetectorModel.load(args.model)
    manifest = DatasetManifest.load(os.path.join(args.data, "manifest.jsonl"))
    report = evaluate(model, manifest, split=args.split, seed=cfg.train.seed,
                      config_hash=cfg.hash(),
                      exclude_fragment=args.exclude_fragment)
    run_dir = _run_dir(cfg)
    report_dir = os.path.join(run_dir, f"eval-{args.split}")
    report.save(report_dir)
    if args.export_heatmaps:
        _export_heatmaps(model, manifest, args.split, report_dir,
                         args.export_heatmaps)
    log.info("accuracy=%.4f auc=%.4f", report.accuracy, report.auc)
    print(os.path.join(report_dir, "report.json"))
    return 0


def _export_heatmaps(model, manifest, split, report_dir, count):
    heat_dir = os.path.join(report_dir, "heatmaps")
    os.makedirs(heat_dir, exist_ok=True)
    for idx, rec in enumerate(manifest.split(split)[:count]):
        img = load_image(os.path.join(manifest.root, rec["image"]))
        lm = load_landmarks(os.path.join(manifest.root, rec["landmarks"]))
        pred = model.predict(img, lm)
        for key, heat in pred.heatmaps.items():
            save_gray(os.path.join(heat_dir, f"{idx:04d}_{key}.png"), heat)
    log.info("wrote heatmaps for %d images to %s", count, heat_dir)


def cmd_generalize(args):
    cfg = _resolve_config(args)
    seeds = [cfg.train.seed + i for i in range(args.num_seeds)]
    os.makedirs(cfg.out_dir, exist_ok=True)
    results, summary = run_generalization(cfg, cfg.out_dir, seeds=seeds,
                                          log=log.info)
    summary_path = os.path.join(cfg.out_dir, "generalization_summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
    print(summary_path)
    return 0


def cmd_ablate(args):
    cfg = _resolve_config(args)
    if cfg.dataset.leave_out is None:
        cfg = RunConfig(dataset=replace(cfg.dataset, leave_out=cfg.dataset.families[2]),
                        model=cfg.model, train=cfg.train, out_dir=cfg.out_dir)
    seeds = [cfg.train.seed + i for i in range(args.num_seeds)]
    os.makedirs(cfg.out_dir, exist_ok=True)
    fragment_rows, attention_rows = run_ablation(cfg, cfg.out_dir, seeds=seeds,
                                                 plan=AblationPlan(), log=log.info)
    out = {"fragments": fragment_rows, "attention": attention_rows}
    path = os.path.join(cfg.out_dir, "ablation_summary.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, sort_keys=True, indent=2)
    print(path)
    return 0


def cmd_gradcheck(args):
    results = selfcheck.run_suite(seed=args.seed or 0)
    lines = []
    worst = 0.0
    for name, err in results.items():
        status = "PASS" if err < selfcheck.TOLERANCE else "FAIL"
        lines.append(f"{name}: {err:.3e} {status}")
        worst = max(worst, err)
    ok = selfcheck.suite_passes(results)
    lines.append(f"worst: {worst:.3e} tolerance: {selfcheck.TOLERANCE:.0e} "
                 f"{'PASS' if ok else 'FAIL'}")
    print("\n".join(lines))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0 if ok else 1


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="semaforge",
        description="Fragment-based manipulated-face detector: synthetic data, "
                    "two-step training, evaluation, and experiment suites.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    _add_common(p)
    p.add_argument("--leave-out", choices=FAMILIES,
                   help="hold one manipulation family out (adds an unseen-test split)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("segment", help="export region masks and fragments for one image")
    _add_common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--fragment-format", choices=("png", "raw"), default="png")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="two-step training")
    _add_common(p)
    p.add_argument("--data", help="dataset directory (default: generate per config)")
    p.add_argument("--step", choices=("1", "2", "both"), default="both")
    p.add_argument("--model", help="checkpoint to continue from (required for --step 2)")
    p.add_argument("--leave-out", choices=FAMILIES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model on a manifest split")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--exclude-fragment", choices=FRAGMENTS)
    p.add_argument("--export-heatmaps", type=int, metavar="N",
                   help="write attention heatmaps for the first N images")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generalize", help="leave-one-family-out experiment suite")
    _add_common(p)
    p.add_argument("--num-seeds", type=int, default=3)
    p.set_defaults(func=cmd_generalize)

    p = sub.add_parser("ablate", help="fragment-removal and attention ablations")
    _add_common(p)
    p.add_argument("--leave-out", choices=FAMILIES)
    p.add_argument("--num-seeds", type=int, default=3)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient self-checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the result table to OUT/gradcheck.txt")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SemaforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
