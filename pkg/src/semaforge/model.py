"""The detector: per-fragment classifiers, fragment weighting, and fusion.

The fragment branch runs each of the six fragments through its own
LocalAttention + Backbone pair and stacks the softmax outputs into a 2x6
probability matrix P (columns ordered like ``FRAGMENTS``). The global
branch runs each gated fragment through its own SemanticAttention head,
giving a 1x6 weight row W, and fuses with scores = P @ W^T. Label
convention: index 0 = fake, index 1 = real; exact ties predict fake.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import read_params, write_params
from .attention import LocalAttention, SemanticAttention
from .config import ModelConfig
from .errors import ContractError
from .layers import BatchNormLayer, ConvLayer, Dense
from .segmentation import FRAGMENTS, segment_image
from .tensor import Tensor

LABEL_FAKE = 0
LABEL_REAL = 1

MODEL_FORMAT_VERSION = 1


class Backbone:
    """Small conv stack: [conv-bn-relu-pool] per stage, then a 2-logit head."""

    def __init__(self, rng, input_size, stages=(16, 32, 64), hidden=128,
                 in_channels=3, name="backbone"):
        self.name = name
        self.stages = []
        cin = in_channels
        size = input_size
        for idx, cout in enumerate(stages):
            conv = ConvLayer(cin, cout, rng, name=f"{name}.block{idx}.conv")
            bn = BatchNormLayer(cout, name=f"{name}.block{idx}.bn")
            self.stages.append((conv, bn))
            cin = cout
            if size % 2:
                raise ContractError(
                    f"backbone: input size {input_size} not divisible through {len(stages)} pools")
            size //= 2
        self.flat_dim = size * size * cin
        self.fc1 = Dense(self.flat_dim, hidden, rng, name=f"{name}.fc1")
        # small head init keeps untrained logits near (0, 0) without the
        # zero-gradient stall of an exactly-zero head
        self.fc2 = Dense(hidden, 2, rng, init_std=0.05, name=f"{name}.fc2")

    def __call__(self, x, training=False):
        h = T.as_tensor(x)
        single = h.data.ndim == 3
        if single:
            h = T.reshape(h, (1,) + h.data.shape)
        for conv, bn in self.stages:
            h = T.maxpool2x2(T.relu(bn(conv(h), training)))
        h = T.reshape(h, (-1, self.flat_dim))
        logits = self.fc2(T.relu(self.fc1(h)))
        return T.reshape(logits, (2,)) if single else logits

    def params(self):
        out = []
        for conv, bn in self.stages:
            out += conv.params() + bn.params()
        return out + self.fc1.params() + self.fc2.params()

    def state(self):
        out = []
        for _, bn in self.stages:
            out += bn.state()
        return out


# ---------------------------------------------------------------------------
# fusion and losses
# ---------------------------------------------------------------------------

def fuse_scores(P, W):
    """scores[y] = sum_i W[i] * P[y, i], accumulated left to right.

    Accepts (2, 6) x (6,) or batched (N, 2, 6) x (N, 6). The explicit
    fragment-by-fragment accumulation makes the result bitwise equal to the
    brute-force weighted sum.
    """
    P = np.asarray(P, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if P.ndim == 2:
        if P.shape != (2, len(FRAGMENTS)) or W.shape != (len(FRAGMENTS),):
            raise ContractError(f"fuse_scores: bad shapes P{P.shape} W{W.shape}")
        scores = np.zeros(2)
        for i in range(len(FRAGMENTS)):
            scores += W[i] * P[:, i]
        return scores
    if P.ndim == 3:
        n = P.shape[0]
        if P.shape != (n, 2, len(FRAGMENTS)) or W.shape != (n, len(FRAGMENTS)):
            raise ContractError(f"fuse_scores: bad shapes P{P.shape} W{W.shape}")
        scores = np.zeros((n, 2))
        for i in range(len(FRAGMENTS)):
            scores += W[:, i: i + 1] * P[:, :, i]
        return scores
    raise ContractError(f"fuse_scores: bad rank for P: {P.shape}")


def decide(scores):
    """Argmax over (fake, real); an exact tie predicts fake."""
    scores = np.asarray(scores)
    if scores.ndim == 1:
        return int(np.argmax(scores))
    return np.argmax(scores, axis=-1).astype(np.int64)


def fragment_predict(p_vec):
    """Per-fragment label from its probability pair (tie -> fake)."""
    p = np.asarray(p_vec, dtype=np.float64)
    if p.shape != (2,):
        raise ContractError(f"fragment_predict: expected 2 probabilities, got {p.shape}")
    return int(np.argmax(p))


def loss_lam(p_vec, y):
    """Per-fragment cross-entropy -log p[y]; accepts Tensor or array."""
    return T.cross_entropy(p_vec, y)


def loss_sam(P, W, y, normalize=True):
    """Fused cross-entropy -log(sum_i p_i^y w_i / sum_i w_i).

    P is a constant (2, 6) or (N, 2, 6) probability matrix, W a Tensor (or
    array) of shape (6,) / (N, 6) with entries in (0, 1). With
    ``normalize=False`` the raw weighted sum goes into the (clamped) log.
    Returns the scalar mean over the batch.
    """
    Pd = np.asarray(P.data if isinstance(P, Tensor) else P, dtype=np.float64)
    Wt = T.as_tensor(W)
    single = Pd.ndim == 2
    if single:
        Pd = Pd[np.newaxis]
    n = Pd.shape[0]
    yv = np.asarray(y).reshape(-1)
    if yv.shape[0] != n:
        raise ContractError(f"loss_sam: {n} samples but {yv.shape[0]} labels")
    if not np.issubdtype(yv.dtype, np.integer) or ((yv != 0) & (yv != 1)).any():
        raise ContractError("loss_sam: labels must be 0 (fake) or 1 (real)")
    W2 = T.reshape(Wt, (1, -1)) if Wt.data.ndim == 1 else Wt
    if W2.data.shape != (n, len(FRAGMENTS)):
        raise ContractError(f"loss_sam: weight shape {Wt.shape} does not match {n} samples")
    if (W2.data <= 0).any():
        raise ContractError("loss_sam: weights must be positive")
    p_true = Pd[np.arange(n), yv]            # (N, 6), constant w.r.t. W
    num = T.tsum(T.mul(W2, p_true), axis=1)
    if normalize:
        den = T.tsum(W2, axis=1)
        arg = T.div(num, den)
    else:
        arg = num
    return T.scale(T.tmean(T.log(arg)), -1.0)


# ---------------------------------------------------------------------------
# the full detector
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    label: int
    scores: np.ndarray          # (2,) fused scores
    possibility: np.ndarray     # (2, 6) matrix P
    weights: np.ndarray         # (6,) row W
    fragment_labels: dict       # key -> per-fragment label
    heatmaps: dict              # key -> (S, S, 1) attention heatmap (may be empty)


class DetectorModel:
    """Six LocalAttention+Backbone pairs and six SemanticAttention heads."""

    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        self.seed = int(seed)
        self.meta = {"fbranch_trained": False, "gbranch_trained": False,
                     "best_epochs": {}}
        ss = np.random.SeedSequence([0x5E3A, self.seed])
        children = ss.spawn(len(FRAGMENTS) * 3)
        self.lams = {}
        self.backbones = {}
        self.sams = {}
        for idx, key in enumerate(FRAGMENTS):
            rng_l = np.random.Generator(np.random.PCG64(children[3 * idx]))
            rng_b = np.random.Generator(np.random.PCG64(children[3 * idx + 1]))
            rng_s = np.random.Generator(np.random.PCG64(children[3 * idx + 2]))
            if config.use_lam:
                self.lams[key] = LocalAttention(rng_l, name=f"lam.{key}")
            self.backbones[key] = Backbone(
                rng_b, config.fragment_size, stages=tuple(config.backbone_stages),
                hidden=config.backbone_hidden, name=f"backbone.{key}")
            if config.use_sam:
                self.sams[key] = SemanticAttention(
                    rng_s, mlp_dims=tuple(config.mlp_dims), name=f"sam.{key}")

    # -- forward paths ------------------------------------------------------

    def fragment_logits(self, key, x, training=False):
        """Graph-building forward of one fragment: logits, gated map, heatmap."""
        xt = T.as_tensor(x)
        if self.config.use_lam:
            x_att, heat = self.lams[key](xt, training)
        else:
            x_att, heat = xt, None
        logits = self.backbones[key](x_att, training)
        return logits, x_att, heat

    def fbranch_forward(self, frags, training=False):
        """All six fragments -> (P, gated fragments, heatmaps); no gradients.

        ``frags`` maps fragment keys to (S, S, 3) or (N, S, S, 3) arrays.
        P has columns in ``FRAGMENTS`` order; each column sums to one.
        """
        missing = [k for k in FRAGMENTS if k not in frags]
        if missing:
            raise ContractError(f"fbranch_forward: missing fragments {missing}")
        x_atts, heats, cols = {}, {}, []
        with T.no_grad():
            for key in FRAGMENTS:
                logits, x_att, heat = self.fragment_logits(key, frags[key], training)
                probs = T.softmax(logits)
                cols.append(probs.data)
                x_atts[key] = x_att.data
                heats[key] = None if heat is None else heat.data
        first = cols[0]
        if first.ndim == 1:
            P = np.stack(cols, axis=1)            # (2, 6)
        else:
            P = np.stack(cols, axis=2)            # (N, 2, 6)
        return P, x_atts, heats

    def gbranch_forward(self, P, x_atts, training=False):
        """Gated fragments -> (W, fused scores, label)."""
        missing = [k for k in FRAGMENTS if k not in x_atts]
        if missing:
            raise ContractError(f"gbranch_forward: missing fragments {missing}")
        single = np.asarray(P).ndim == 2
        if self.config.use_sam:
            ws = []
            with T.no_grad():
                for key in FRAGMENTS:
                    w = self.sams[key](x_atts[key], training)
                    ws.append(w.data.reshape(-1))
            W = np.stack(ws, axis=0)[:, 0] if single else np.stack(ws, axis=1)
        else:
            n = None if single else np.asarray(P).shape[0]
            W = (np.full(len(FRAGMENTS), 1.0 / len(FRAGMENTS)) if single
                 else np.full((n, len(FRAGMENTS)), 1.0 / len(FRAGMENTS)))
        scores = fuse_scores(P, W)
        return W, scores, decide(scores)

    def predict(self, image, landmarks):
        """Segment, classify, weight, and fuse one image."""
        _, frags = segment_image(image, landmarks, size=self.config.fragment_size)
        P, x_atts, heats = self.fbranch_forward(frags.crops, training=False)
        W, scores, label = self.gbranch_forward(P, x_atts, training=False)
        frag_labels = {key: fragment_predict(P[:, i]) for i, key in enumerate(FRAGMENTS)}
        return Prediction(label=int(label), scores=scores, possibility=P,
                          weights=W, fragment_labels=frag_labels,
                          heatmaps={k: h for k, h in heats.items() if h is not None})

    # -- parameter access ----------------------------------------------------

    def fbranch_entries(self, key):
        """Ordered (name, array) pairs of one fragment's classifier."""
        entries = []
        if self.config.use_lam:
            entries += [(n, p.data) for n, p in self.lams[key].params()]
            entries += self.lams[key].state()
        entries += [(n, p.data) for n, p in self.backbones[key].params()]
        entries += self.backbones[key].state()
        return entries

    def gbranch_entries(self, key):
        entries = [(n, p.data) for n, p in self.sams[key].params()]
        entries += self.sams[key].state()
        return entries

    def fbranch_params(self, key):
        params = []
        if self.config.use_lam:
            params += self.lams[key].params()
        params += self.backbones[key].params()
        return params

    def gbranch_params(self, key):
        return self.sams[key].params()

    def _load_entries(self, key, branch, blob):
        if branch == "f":
            targets = (self.lams[key].params() if self.config.use_lam else []) \
                + self.backbones[key].params()
            buffers = (self.lams[key].state() if self.config.use_lam else []) \
                + self.backbones[key].state()
        else:
            targets = self.sams[key].params()
            buffers = self.sams[key].state()
        for name, p in targets:
            if name not in blob:
                raise ContractError(f"checkpoint missing parameter '{name}'")
            if blob[name].shape != p.data.shape:
                raise ContractError(
                    f"checkpoint parameter '{name}' has shape {blob[name].shape}, "
                    f"expected {p.data.shape}")
            p.data = blob[name].copy()
        for name, buf in buffers:
            if name not in blob:
                raise ContractError(f"checkpoint missing buffer '{name}'")
            buf[...] = blob[name]
        if branch == "f":
            bns = ([self.lams[key].bn] if self.config.use_lam else []) \
                + [bn for _, bn in self.backbones[key].stages]
        else:
            bns = [self.sams[key].bn]
        for bn in bns:
            bn._seeded = True

    # -- persistence ----------------------------------------------------------

    def save(self, dirpath):
        os.makedirs(dirpath, exist_ok=True)
        manifest = {
            "format_version": MODEL_FORMAT_VERSION,
            "fragment_keys": list(FRAGMENTS),
            "config": {
                "fragment_size": self.config.fragment_size,
                "backbone_stages": list(self.config.backbone_stages),
                "backbone_hidden": self.config.backbone_hidden,
                "mlp_dims": list(self.config.mlp_dims),
                "use_lam": self.config.use_lam,
                "use_sam": self.config.use_sam,
            },
            "seed": self.seed,
            "meta": self.meta,
        }
        with open(os.path.join(dirpath, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)
            fh.write("\n")
        for key in FRAGMENTS:
            write_params(os.path.join(dirpath, f"fbranch_{key}.bin"),
                         self.fbranch_entries(key))
            if self.config.use_sam:
                write_params(os.path.join(dirpath, f"gbranch_{key}.bin"),
                             self.gbranch_entries(key))

    @classmethod
    def load(cls, dirpath):
        with open(os.path.join(dirpath, "manifest.json"), "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        if manifest.get("format_version") != MODEL_FORMAT_VERSION:
            raise ContractError(f"unsupported model format in {dirpath}")
        cfg_d = manifest["config"]
        config = ModelConfig(
            fragment_size=cfg_d["fragment_size"],
            backbone_stages=tuple(cfg_d["backbone_stages"]),
            backbone_hidden=cfg_d["backbone_hidden"],
            mlp_dims=tuple(cfg_d["mlp_dims"]),
            use_lam=cfg_d["use_lam"],
            use_sam=cfg_d["use_sam"],
        )
        model = cls(config, seed=manifest["seed"])
        model.meta = manifest["meta"]
        for key in FRAGMENTS:
            blob = read_params(os.path.join(dirpath, f"fbranch_{key}.bin"))
            model._load_entries(key, "f", blob)
            if config.use_sam:
                blob = read_params(os.path.join(dirpath, f"gbranch_{key}.bin"))
                model._load_entries(key, "g", blob)
        return model
