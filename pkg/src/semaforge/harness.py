"""Experiment protocols: evaluation, leave-one-family-out, ablations.

Reports are pure functions of (model, manifest, seed): nothing time- or
path-dependent goes into them, so re-running a configuration reproduces
the same JSON byte for byte.
"""

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .config import RunConfig
from .errors import ContractError
from .metrics import EvalReport, accuracy, confusion, roc_auc
from .model import DetectorModel, decide, fuse_scores, fragment_predict
from .segmentation import FRAGMENTS
from .synthetic import DatasetManifest, generate_dataset
from .train import build_fragment_cache, train_two_step, _frozen_fbranch_pass

FAKE_CLASS = 0


def fake_score(scores):
    """Normalized fake mass of the fused score vector, used for the ROC."""
    scores = np.asarray(scores, dtype=np.float64)
    total = scores.sum(axis=-1)
    return scores[..., FAKE_CLASS] / total


def evaluate_cache(model, cache, dataset_id="", split="", seed=0,
                   config_hash="", exclude_fragment=None):
    """Evaluate a prepared fragment cache; returns an EvalReport."""
    if len(cache) == 0:
        raise ContractError("evaluate: empty split")
    if exclude_fragment is not None and exclude_fragment not in FRAGMENTS:
        raise ContractError(f"evaluate: unknown fragment {exclude_fragment!r}")
    P, x_atts = _frozen_fbranch_pass(model, cache)
    n = len(cache)
    if model.config.use_sam:
        ws = []
        with T.no_grad():
            for key in FRAGMENTS:
                w = model.sams[key](x_atts[key].astype(np.float64), training=False)
                ws.append(w.data.reshape(-1))
        W = np.stack(ws, axis=1)
    else:
        W = np.full((n, len(FRAGMENTS)), 1.0 / len(FRAGMENTS))
    if exclude_fragment is not None:
        W = W.copy()
        W[:, FRAGMENTS.index(exclude_fragment)] = 0.0
    scores = fuse_scores(P, W)
    pred = decide(scores)
    truth = cache.labels
    frag_acc = {}
    for i, key in enumerate(FRAGMENTS):
        frag_pred = np.argmax(P[:, :, i], axis=1)
        frag_acc[key] = float((frag_pred == truth).mean())
    (fpr, tpr, thr), auc = roc_auc(fake_score(scores), truth == FAKE_CLASS)
    return EvalReport(
        dataset_id=dataset_id,
        split=split,
        n_fake=int((truth == 0).sum()),
        n_real=int((truth == 1).sum()),
        accuracy=accuracy(pred, truth),
        confusion=confusion(pred, truth, positive=FAKE_CLASS),
        auc=auc,
        roc_points=[(float(a), float(b), float(c)) for a, b, c in zip(fpr, tpr, thr)],
        fragment_accuracy=frag_acc,
        seed=seed,
        config_hash=config_hash,
        extra={"excluded_fragment": exclude_fragment},
    )


def evaluate(model, manifest: DatasetManifest, split="test", seed=0,
             config_hash="", exclude_fragment=None, dataset_id=""):
    """Evaluate one manifest split end to end (segmentation included)."""
    records = manifest.split(split)
    if not records:
        raise ContractError(f"evaluate: split {split!r} is empty")
    cache = build_fragment_cache(records, manifest.root,
                                 model.config.fragment_size)
    return evaluate_cache(model, cache, dataset_id=dataset_id or manifest.root,
                          split=split, seed=seed, config_hash=config_hash,
                          exclude_fragment=exclude_fragment)


# ---------------------------------------------------------------------------
# dataset + training helpers shared by the protocol runners
# ---------------------------------------------------------------------------

def ensure_dataset(ds_cfg, work_dir):
    """Generate (or reuse) the dataset for a config; keyed by its hash."""
    tag = RunConfig(dataset=ds_cfg).hash()
    ds_dir = os.path.join(work_dir, f"ds-{tag}")
    manifest_path = os.path.join(ds_dir, "manifest.jsonl")
    if os.path.exists(manifest_path):
        return DatasetManifest.load(manifest_path)
    os.makedirs(ds_dir, exist_ok=True)
    return generate_dataset(ds_cfg, ds_dir)


def train_model(run_cfg: RunConfig, manifest, caches=None, log=None):
    """Build and train a model per the run config on a manifest."""
    if caches is None:
        caches = {}
    size = run_cfg.model.fragment_size
    for split in ("train", "val"):
        if (split, size) not in caches:
            caches[(split, size)] = build_fragment_cache(
                manifest.split(split), manifest.root, size)
    model = DetectorModel(run_cfg.model, seed=run_cfg.train.seed)
    metrics = train_two_step(model, caches[("train", size)],
                             caches[("val", size)], run_cfg.train, log=log)
    return model, metrics


# ---------------------------------------------------------------------------
# generalization protocol
# ---------------------------------------------------------------------------

def run_generalization(run_cfg: RunConfig, work_dir, seeds=(0, 1, 2), log=None):
    """Leave each family out in turn; train and test on seen + unseen.

    Returns {family: {"unseen": [...], "seen": [...]}} with one report per
    seed, plus table rows of per-family means, and writes a summary CSV.
    """
    families = list(run_cfg.dataset.families)
    results = {}
    for fam in families:
        ds_cfg = replace(run_cfg.dataset, leave_out=fam)
        manifest = ensure_dataset(ds_cfg, work_dir)
        caches = {}
        fam_unseen, fam_seen = [], []
        for seed in seeds:
            cfg = run_cfg.with_seed(seed)
            if log:
                log(f"generalization: leave-out={fam} seed={seed}")
            model, _ = train_model(cfg, manifest, caches, log=log)
            chash = cfg.hash()
            size = cfg.model.fragment_size
            for split, bucket in (("unseen-test", fam_unseen), ("test", fam_seen)):
                if (split, size) not in caches:
                    caches[(split, size)] = build_fragment_cache(
                        manifest.split(split), manifest.root, size)
                rep = evaluate_cache(model, caches[(split, size)],
                                     dataset_id=f"leave-out-{fam}", split=split,
                                     seed=seed, config_hash=chash)
                bucket.append(rep)
                rep.save(os.path.join(work_dir, "runs",
                                      f"gen-{fam}-{chash}-s{seed}", split))
        results[fam] = {"unseen": fam_unseen, "seen": fam_seen}

    summary = {
        "unseen_mean": {fam: float(np.mean([r.accuracy for r in res["unseen"]]))
                        for fam, res in results.items()},
        "seen_mean": {fam: float(np.mean([r.accuracy for r in res["seen"]]))
                      for fam, res in results.items()},
        "seeds": list(seeds),
    }
    _write_generalization_csv(os.path.join(work_dir, "generalization_summary.csv"),
                              results, summary, families)
    return results, summary


def _write_generalization_csv(path, results, summary, families):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric," + ",".join(families) + "\n")
        for metric in ("unseen_mean", "seen_mean"):
            row = [f"{summary[metric][fam]:.4f}" for fam in families]
            fh.write(metric + "," + ",".join(row) + "\n")
        for i, _ in enumerate(summary["seeds"]):
            row = [f"{results[fam]['unseen'][i].accuracy:.4f}" for fam in families]
            fh.write(f"unseen_seed{summary['seeds'][i]}," + ",".join(row) + "\n")


# ---------------------------------------------------------------------------
# ablation protocol
# ---------------------------------------------------------------------------

ATTENTION_VARIANTS = ("none", "sam", "lams", "lams+sam")


@dataclass
class AblationPlan:
    fragment_removals: tuple = FRAGMENTS + (None,)
    attention_variants: tuple = ATTENTION_VARIANTS


def _variant_model_cfg(model_cfg, variant):
    toggles = {
        "none": dict(use_lam=False, use_sam=False),
        "sam": dict(use_lam=False, use_sam=True),
        "lams": dict(use_lam=True, use_sam=False),
        "lams+sam": dict(use_lam=True, use_sam=True),
    }
    if variant not in toggles:
        raise ContractError(f"unknown attention variant {variant!r}")
    return replace(model_cfg, **toggles[variant])


def run_ablation(run_cfg: RunConfig, work_dir, seeds=(0, 1, 2),
                 plan: AblationPlan = None, log=None):
    """Fragment-removal and attention-toggle ablations on one leave-out set.

    Fragment removal zeroes that fragment's fused weight at evaluation time
    (the other fragments are not retrained); attention variants are
    retrained from scratch per seed. Returns row dicts for both tables.
    """
    plan = plan or AblationPlan()
    if run_cfg.dataset.leave_out is None:
        raise ContractError("ablation needs dataset.leave_out set")
    manifest = ensure_dataset(run_cfg.dataset, work_dir)
    caches = {}
    size = run_cfg.model.fragment_size

    def split_cache(split):
        if (split, size) not in caches:
            caches[(split, size)] = build_fragment_cache(
                manifest.split(split), manifest.root, size)
        return caches[(split, size)]

    # full models, one per seed; reused for fragment removal and lams+sam row
    full_models = {}
    for seed in seeds:
        cfg = run_cfg.with_seed(seed)
        if log:
            log(f"ablation: full model seed={seed}")
        full_models[seed], _ = train_model(cfg, manifest, caches, log=log)

    fragment_rows = []
    for removed in plan.fragment_removals:
        row = {"removed": removed or "none", "seen": [], "unseen": []}
        for seed in seeds:
            model = full_models[seed]
            chash = run_cfg.with_seed(seed).hash()
            for split, col in (("test", "seen"), ("unseen-test", "unseen")):
                rep = evaluate_cache(model, split_cache(split),
                                     dataset_id=f"ablate-{run_cfg.dataset.leave_out}",
                                     split=split, seed=seed, config_hash=chash,
                                     exclude_fragment=removed)
                row[col].append(rep.accuracy)
                if removed is None:
                    rep.save(os.path.join(work_dir, "runs",
                                          f"ablate-none-{chash}-s{seed}", split))
        row["seen_mean"] = float(np.mean(row["seen"]))
        row["unseen_mean"] = float(np.mean(row["unseen"]))
        fragment_rows.append(row)

    attention_rows = []
    for variant in plan.attention_variants:
        row = {"variant": variant, "seen": [], "unseen": []}
        for seed in seeds:
            if variant == "lams+sam":
                model = full_models[seed]
            else:
                cfg = replace(run_cfg.with_seed(seed),
                              model=_variant_model_cfg(run_cfg.model, variant))
                if log:
                    log(f"ablation: variant={variant} seed={seed}")
                model, _ = train_model(cfg, manifest, caches, log=log)
            for split, col in (("test", "seen"), ("unseen-test", "unseen")):
                rep = evaluate_cache(model, split_cache(split),
                                     dataset_id=f"ablate-{run_cfg.dataset.leave_out}",
                                     split=split, seed=seed)
                row[col].append(rep.accuracy)
        row["seen_mean"] = float(np.mean(row["seen"]))
        row["unseen_mean"] = float(np.mean(row["unseen"]))
        attention_rows.append(row)

    _write_ablation_csvs(work_dir, fragment_rows, attention_rows, seeds)
    return fragment_rows, attention_rows


def _write_ablation_csvs(work_dir, fragment_rows, attention_rows, seeds):
    seed_cols = ",".join(f"seen_s{s}" for s in seeds) + "," + \
        ",".join(f"unseen_s{s}" for s in seeds)
    with open(os.path.join(work_dir, "ablation_fragments.csv"), "w",
              encoding="utf-8") as fh:
        fh.write(f"removed_fragment,seen_mean,unseen_mean,{seed_cols}\n")
        for row in fragment_rows:
            cells = [f"{v:.4f}" for v in row["seen"]] + \
                [f"{v:.4f}" for v in row["unseen"]]
            fh.write(f"{row['removed']},{row['seen_mean']:.4f},"
                     f"{row['unseen_mean']:.4f}," + ",".join(cells) + "\n")
    with open(os.path.join(work_dir, "ablation_attention.csv"), "w",
              encoding="utf-8") as fh:
        fh.write(f"attention_variant,seen_mean,unseen_mean,{seed_cols}\n")
        for row in attention_rows:
            cells = [f"{v:.4f}" for v in row["seen"]] + \
                [f"{v:.4f}" for v in row["unseen"]]
            fh.write(f"{row['variant']},{row['seen_mean']:.4f},"
                     f"{row['unseen_mean']:.4f}," + ",".join(cells) + "\n")
