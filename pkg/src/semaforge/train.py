"""Two-step training.

Step one trains the six per-fragment classifiers (LocalAttention +
Backbone) independently with per-fragment cross-entropy. Step two freezes
them completely (parameters and batch-norm statistics) and trains the six
SemanticAttention heads with the fused cross-entropy. Both steps keep the
parameter snapshot with the best validation accuracy (ties broken by lower
validation loss).

Fragments are cached as float32 up front (one segmentation pass per image)
and cast to float64 per batch. Training batches of size one are dropped:
batch norm in train mode needs at least two samples.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .errors import ContractError
from .imgio import load_image, load_landmarks
from .layers import SgdMomentum
from .model import DetectorModel, decide, fuse_scores, loss_sam
from .segmentation import FRAGMENTS, segment_image

LABELS = {"fake": 0, "real": 1}


@dataclass
class FragmentCache:
    """Per-fragment stacked crops (float32) plus labels for a manifest split."""

    frags: dict                 # key -> (N, S, S, 3) float32
    labels: np.ndarray          # (N,) int64
    ids: list

    def __len__(self):
        return int(self.labels.shape[0])


def build_fragment_cache(records, root, size):
    """Segment every record once and stack the six fragment crops."""
    if not records:
        raise ContractError("empty manifest split")
    per_key = {k: [] for k in FRAGMENTS}
    labels = []
    ids = []
    for rec in records:
        img = load_image(os.path.join(root, rec["image"]))
        lm = load_landmarks(os.path.join(root, rec["landmarks"]))
        _, frags = segment_image(img, lm, size=size, source_id=rec["image"])
        for k in FRAGMENTS:
            per_key[k].append(frags[k].astype(np.float32))
        labels.append(LABELS[rec["label"]])
        ids.append(rec["image"])
    return FragmentCache(
        frags={k: np.stack(v) for k, v in per_key.items()},
        labels=np.asarray(labels, dtype=np.int64),
        ids=ids,
    )


def cache_from_arrays(frags, labels, ids=None):
    """Build a cache directly from arrays (used by tests and tools)."""
    labels = np.asarray(labels, dtype=np.int64)
    return FragmentCache(
        frags={k: np.asarray(v, dtype=np.float32) for k, v in frags.items()},
        labels=labels,
        ids=ids or [str(i) for i in range(labels.shape[0])],
    )


def _check_two_classes(labels, what):
    n_fake = int((labels == 0).sum())
    n_real = int((labels == 1).sum())
    if n_fake == 0 or n_real == 0:
        raise ContractError(
            f"{what} split is single-class (fake={n_fake}, real={n_real}); "
            "training needs both labels")


def _batches(n, batch_size, rng):
    """Shuffled batch index slices; a trailing singleton batch is dropped."""
    order = rng.permutation(n)
    out = []
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if idx.shape[0] >= 2:
            out.append(idx)
    return out


def _snapshot(params, state):
    return ([p.data.copy() for _, p in params], [b.copy() for _, b in state])


def _restore(params, state, snap):
    pvals, bvals = snap
    for (_, p), val in zip(params, pvals):
        p.data = val.copy()
    for (_, b), val in zip(state, bvals):
        b[...] = val


def _fragment_val_stats(model, key, cache, batch_size=64):
    """Accuracy and mean loss of one fragment classifier on a cache."""
    n = len(cache)
    correct = 0
    total_loss = 0.0
    with T.no_grad():
        for start in range(0, n, batch_size):
            xb = cache.frags[key][start:start + batch_size].astype(np.float64)
            yb = cache.labels[start:start + batch_size]
            logits, _, _ = model.fragment_logits(key, xb, training=False)
            probs = T.softmax(logits).data
            pred = np.argmax(probs, axis=1)
            correct += int((pred == yb).sum())
            picked = np.maximum(probs[np.arange(len(yb)), yb], T.LOG_FLOOR)
            total_loss += float(-np.log(picked).sum())
    return correct / n, total_loss / n


def _train_one_fragment(model, key, cache_train, cache_val, cfg: TrainConfig,
                        log=None):
    params = model.fbranch_params(key)
    state = (model.lams[key].state() if model.config.use_lam else []) \
        + model.backbones[key].state()
    opt = SgdMomentum(params, lr0=cfg.lr0, momentum=cfg.momentum,
                      decay_factor=cfg.decay_factor, decay_period=cfg.decay_period)
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([cfg.seed, 101, FRAGMENTS.index(key)])))
    history = []
    best = None
    best_snap = None
    for epoch in range(cfg.epochs_fbranch):
        lr = opt.lr_at_epoch(epoch)
        epoch_loss = 0.0
        n_seen = 0
        for idx in _batches(len(cache_train), cfg.batch_size, rng):
            xb = cache_train.frags[key][idx].astype(np.float64)
            yb = cache_train.labels[idx]
            logits, _, _ = model.fragment_logits(key, xb, training=True)
            loss = T.cross_entropy(T.softmax(logits), yb)
            T.backward(loss)
            opt.step(lr)
            epoch_loss += float(loss.data) * len(idx)
            n_seen += len(idx)
        val_acc, val_loss = _fragment_val_stats(model, key, cache_val)
        history.append({"epoch": epoch, "lr": lr,
                        "train_loss": epoch_loss / max(n_seen, 1),
                        "val_acc": val_acc, "val_loss": val_loss})
        if log:
            log(f"fragment {key} epoch {epoch}: val_acc={val_acc:.4f} "
                f"val_loss={val_loss:.4f}")
        score = (val_acc, -val_loss)
        if best is None or score > best:
            best = score
            best_snap = _snapshot(params, state)
            best_epoch = epoch
    if best_snap is not None:
        _restore(params, state, best_snap)
        return {"history": history, "best_epoch": best_epoch,
                "best_val_acc": best[0], "trained": True}
    return {"trained": False, "history": []}


def train_fbranch(model: DetectorModel, cache_train, cache_val,
                  cfg: TrainConfig, log=None):
    """Step one: six independent per-fragment optimizations."""
    _check_two_classes(cache_train.labels, "train")
    if cfg.epochs_fbranch == 0:
        return {"trained": False, "fragments": {}}
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = {key: pool.submit(_train_one_fragment, model, key,
                                        cache_train, cache_val, cfg, log)
                       for key in FRAGMENTS}
            frag_metrics = {key: fut.result() for key, fut in futures.items()}
    else:
        frag_metrics = {key: _train_one_fragment(model, key, cache_train,
                                                 cache_val, cfg, log)
                        for key in FRAGMENTS}
    model.meta["fbranch_trained"] = True
    model.meta["best_epochs"]["fbranch"] = {
        k: m.get("best_epoch") for k, m in frag_metrics.items()}
    return {"trained": True, "fragments": frag_metrics}


def _frozen_fbranch_pass(model, cache, batch_size=64):
    """Run the frozen classifiers once; cache gated fragments and P."""
    n = len(cache)
    x_atts = {k: np.empty((n,) + cache.frags[k].shape[1:], dtype=np.float32)
              for k in FRAGMENTS}
    P = np.empty((n, 2, len(FRAGMENTS)))
    with T.no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, min(start + batch_size, n))
            frag_batch = {k: cache.frags[k][sl].astype(np.float64)
                          for k in FRAGMENTS}
            Pb, xab, _ = model.fbranch_forward(frag_batch, training=False)
            P[sl] = Pb
            for k in FRAGMENTS:
                x_atts[k][sl] = xab[k].astype(np.float32)
    return P, x_atts


def _fused_val_stats(model, P, x_atts, labels, cfg, batch_size=64):
    n = labels.shape[0]
    correct = 0
    total_loss = 0.0
    with T.no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, min(start + batch_size, n))
            ws = []
            for key in FRAGMENTS:
                w = model.sams[key](x_atts[key][sl].astype(np.float64),
                                    training=False)
                ws.append(w.data.reshape(-1))
            W = np.stack(ws, axis=1)
            scores = fuse_scores(P[sl], W)
            pred = decide(scores)
            correct += int((pred == labels[sl]).sum())
            loss = loss_sam(P[sl], W, labels[sl],
                            normalize=cfg.sam_loss_normalize)
            total_loss += float(loss.data) * (sl.stop - sl.start)
    return correct / n, total_loss / n


def train_gbranch(model: DetectorModel, cache_train, cache_val,
                  cfg: TrainConfig, log=None):
    """Step two: train the weight heads against the frozen fragment branch."""
    if not model.config.use_sam:
        raise ContractError("train_gbranch: model was built without weight heads")
    if not model.meta.get("fbranch_trained"):
        raise ContractError(
            "train_gbranch: fragment branch is untrained; run step one first "
            "or load its checkpoint")
    _check_two_classes(cache_train.labels, "train")
    if cfg.epochs_gbranch == 0:
        return {"trained": False, "history": []}

    P_tr, xatt_tr = _frozen_fbranch_pass(model, cache_train)
    P_va, xatt_va = _frozen_fbranch_pass(model, cache_val)

    params = []
    state = []
    for key in FRAGMENTS:
        params += model.gbranch_params(key)
        state += model.sams[key].state()
    opt = SgdMomentum(params, lr0=cfg.lr0, momentum=cfg.momentum,
                      decay_factor=cfg.decay_factor, decay_period=cfg.decay_period)
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([cfg.seed, 202])))
    labels_tr = cache_train.labels
    history = []
    best = None
    best_snap = None
    for epoch in range(cfg.epochs_gbranch):
        lr = opt.lr_at_epoch(epoch)
        epoch_loss = 0.0
        n_seen = 0
        for idx in _batches(len(cache_train), cfg.batch_size, rng):
            ws = []
            for key in FRAGMENTS:
                xb = xatt_tr[key][idx].astype(np.float64)
                ws.append(model.sams[key](xb, training=True))
            W = T.concat(ws, axis=1)
            loss = loss_sam(P_tr[idx], W, labels_tr[idx],
                            normalize=cfg.sam_loss_normalize)
            T.backward(loss)
            opt.step(lr)
            epoch_loss += float(loss.data) * len(idx)
            n_seen += len(idx)
        val_acc, val_loss = _fused_val_stats(model, P_va, xatt_va,
                                             cache_val.labels, cfg)
        history.append({"epoch": epoch, "lr": lr,
                        "train_loss": epoch_loss / max(n_seen, 1),
                        "val_acc": val_acc, "val_loss": val_loss})
        if log:
            log(f"weight heads epoch {epoch}: val_acc={val_acc:.4f} "
                f"val_loss={val_loss:.4f}")
        score = (val_acc, -val_loss)
        if best is None or score > best:
            best = score
            best_snap = _snapshot(params, state)
            best_epoch = epoch
    _restore(params, state, best_snap)
    model.meta["gbranch_trained"] = True
    model.meta["best_epochs"]["gbranch"] = best_epoch
    return {"trained": True, "history": history, "best_epoch": best_epoch,
            "best_val_acc": best[0]}


def train_two_step(model, cache_train, cache_val, cfg, log=None, step="both"):
    """Run the requested training steps; returns combined metrics."""
    metrics = {}
    if step in ("1", "both"):
        metrics["fbranch"] = train_fbranch(model, cache_train, cache_val, cfg, log)
    if step in ("2", "both") and model.config.use_sam:
        metrics["gbranch"] = train_gbranch(model, cache_train, cache_val, cfg, log)
    return metrics
