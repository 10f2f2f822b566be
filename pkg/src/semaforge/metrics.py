"""Classification metrics: accuracy, confusion counts, ROC curve, AUC.

The ROC positive class is the fake class (label 0); callers pass an
``is_positive`` indicator. AUC integrates the threshold-swept curve with
the trapezoidal rule, which equals the pairwise Mann-Whitney statistic
(ties counted one half).
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError


def accuracy(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.size == 0:
        raise ContractError(f"accuracy: bad shapes {pred.shape} vs {truth.shape}")
    return float((pred == truth).mean())


def confusion(pred, truth, positive=0):
    """2x2 counts: tp, fp, tn, fn with the given positive label."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    tp = int(((pred == positive) & (truth == positive)).sum())
    fp = int(((pred == positive) & (truth != positive)).sum())
    tn = int(((pred != positive) & (truth != positive)).sum())
    fn = int(((pred != positive) & (truth == positive)).sum())
    return {"tp": tp, "fp": fp, "tn": tn, "fn": fn}


def roc_curve(scores, is_positive):
    """Threshold sweep over the unique scores, descending.

    Returns (fpr, tpr, thresholds) arrays starting at (0, 0, +inf). Both
    coordinate arrays are nondecreasing.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_positive, dtype=bool)
    if scores.shape != pos.shape or scores.ndim != 1:
        raise ContractError(f"roc_curve: bad shapes {scores.shape} vs {pos.shape}")
    n_pos = int(pos.sum())
    n_neg = int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError(
            f"roc_curve: need both classes, got {n_pos} positive / {n_neg} negative")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    p = pos[order]
    # last index of each run of equal scores
    distinct = np.nonzero(np.diff(s))[0]
    cut = np.concatenate([distinct, [s.size - 1]])
    tps = np.cumsum(p)[cut]
    fps = (cut + 1) - tps
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    thresholds = np.concatenate([[np.inf], s[cut]])
    return fpr, tpr, thresholds


def roc_auc(scores, is_positive):
    """(curve points, AUC) by trapezoidal integration of the ROC."""
    fpr, tpr, thr = roc_curve(scores, is_positive)
    auc = float(np.trapezoid(tpr, fpr))
    return (fpr, tpr, thr), auc


def auc_pairwise(scores, is_positive):
    """Brute-force Mann-Whitney statistic (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_positive, dtype=bool)
    sp = scores[pos]
    sn = scores[~pos]
    if sp.size == 0 or sn.size == 0:
        raise ContractError("auc_pairwise: need both classes")
    wins = (sp[:, None] > sn[None, :]).sum()
    ties = (sp[:, None] == sn[None, :]).sum()
    return float((wins + 0.5 * ties) / (sp.size * sn.size))


@dataclass
class EvalReport:
    dataset_id: str
    split: str
    n_fake: int
    n_real: int
    accuracy: float
    confusion: dict
    auc: float
    roc_points: list                     # [(fpr, tpr, threshold), ...]
    fragment_accuracy: dict              # fragment key -> accuracy
    seed: int = 0
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def save(self, dirpath):
        import os

        os.makedirs(dirpath, exist_ok=True)
        with open(os.path.join(dirpath, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")
        with open(os.path.join(dirpath, "report.csv"), "w", encoding="utf-8") as fh:
            fh.write("dataset,split,n_fake,n_real,accuracy,auc\n")
            fh.write(f"{self.dataset_id},{self.split},{self.n_fake},"
                     f"{self.n_real},{self.accuracy!r},{self.auc!r}\n")
        with open(os.path.join(dirpath, "roc_points.csv"), "w", encoding="utf-8") as fh:
            fh.write("fpr,tpr,threshold\n")
            for fpr, tpr, thr in self.roc_points:
                fh.write(f"{fpr!r},{tpr!r},{thr!r}\n")

    @classmethod
    def from_json_file(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(**d)
