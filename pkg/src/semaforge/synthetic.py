"""Procedural face-like images with exact 81-point landmarks.

The renderer composes anti-aliased ellipses and capsules (background, face,
brows, eyes, nose, mouth) and adds uniform texture noise. Landmarks are
computed analytically from the same geometry, so region hulls are exact by
construction: 0-16 jaw, 17-26 brows, 27-35 nose, 36-47 eyes, 48-67 mouth,
68-80 forehead.

Four manipulation families stand in for unseen forgery methods: two local
(noise patches inside the eyes or mouth hull) and two global (sinusoidal
warp, channel mixing). Local families touch pixels only inside the dilated
region hull, bit-exact. All families scale continuously to identity as
strength goes to zero, and every family adds a faint strength-scaled grain
(a stand-in for the resampling artifacts common to editing pipelines).
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .config import DatasetConfig, FAMILIES
from .errors import ContractError
from .imgio import save_image, save_landmarks
from .segmentation import group_landmarks

GRAIN_AMP = 0.025
WARP_MAX_PX = 7.0

_SPLIT_IDS = {"train": 1, "val": 2, "test": 3, "unseen-test": 4}
_FAMILY_IDS = {"real": 0, **{name: i + 1 for i, name in enumerate(FAMILIES)}}


# ---------------------------------------------------------------------------
# geometry + rendering
# ---------------------------------------------------------------------------

@dataclass
class FaceParams:
    seed: int
    canvas: int = 128
    cx: float = 64.0
    cy: float = 66.0
    ax: float = 42.0            # face semi-axes
    ay: float = 50.0
    eye_dx: float = 18.0        # eye center offset from face center
    eye_dy: float = -12.0
    eye_rx: float = 7.0
    eye_ry: float = 4.5
    iris_r: float = 2.8
    brow_dy: float = -9.0       # brow offset from eye center
    brow_halfw: float = 8.5
    brow_thick: float = 1.6
    nose_top_dy: float = -8.0
    nose_tip_dy: float = 9.0
    nose_halfw: float = 7.0
    mouth_dy: float = 26.0
    mouth_rx: float = 14.0
    mouth_ry: float = 5.5
    skin: tuple = (0.78, 0.62, 0.52)
    bg_a: tuple = (0.35, 0.45, 0.60)
    bg_b: tuple = (0.55, 0.60, 0.70)
    sclera: tuple = (0.92, 0.92, 0.90)
    iris: tuple = (0.25, 0.35, 0.55)
    brow_color: tuple = (0.25, 0.18, 0.12)
    lip_color: tuple = (0.62, 0.28, 0.30)
    nose_shade: tuple = (0.60, 0.45, 0.38)
    noise_amp: float = 0.02

    @classmethod
    def sample(cls, rng, canvas=128):
        """Draw random but in-canvas face geometry and colors."""
        s = canvas / 128.0
        ax = rng.uniform(36, 46) * s
        ay = rng.uniform(44, 54) * s
        cx = canvas / 2 + rng.uniform(-4, 4) * s
        cy = canvas / 2 + rng.uniform(-1, 5) * s
        eye_rx = rng.uniform(5.5, 8.0) * s
        skin_r = rng.uniform(0.55, 0.88)
        bg_base = rng.uniform(0.2, 0.75, size=3)
        return cls(
            seed=int(rng.integers(0, 2 ** 31)),
            canvas=canvas,
            cx=cx, cy=cy, ax=ax, ay=ay,
            eye_dx=rng.uniform(0.38, 0.48) * ax,
            eye_dy=-rng.uniform(0.18, 0.28) * ay,
            eye_rx=eye_rx,
            eye_ry=eye_rx * rng.uniform(0.55, 0.7),
            iris_r=eye_rx * rng.uniform(0.35, 0.45),
            brow_dy=-rng.uniform(0.14, 0.20) * ay,
            brow_halfw=eye_rx * rng.uniform(1.1, 1.3),
            brow_thick=rng.uniform(1.2, 2.0) * s,
            nose_top_dy=-rng.uniform(0.12, 0.18) * ay,
            nose_tip_dy=rng.uniform(0.14, 0.22) * ay,
            nose_halfw=rng.uniform(0.13, 0.19) * ax,
            mouth_dy=rng.uniform(0.48, 0.58) * ay,
            mouth_rx=rng.uniform(0.28, 0.38) * ax,
            mouth_ry=rng.uniform(0.30, 0.42) * rng.uniform(0.28, 0.38) * ax,
            skin=(skin_r, skin_r * rng.uniform(0.75, 0.85),
                  skin_r * rng.uniform(0.58, 0.72)),
            bg_a=tuple(bg_base),
            bg_b=tuple(np.clip(bg_base + rng.uniform(0.05, 0.25, size=3), 0, 1)),
            sclera=(rng.uniform(0.85, 0.95),) * 3,
            iris=tuple(rng.uniform((0.1, 0.2, 0.3), (0.4, 0.5, 0.7))),
            brow_color=tuple(rng.uniform(0.1, 0.35, size=3)),
            lip_color=(rng.uniform(0.5, 0.7), rng.uniform(0.2, 0.35),
                       rng.uniform(0.25, 0.4)),
            nose_shade=(skin_r * 0.8, skin_r * 0.62, skin_r * 0.5),
            noise_amp=0.02,
        )


def _grids(canvas):
    y = np.arange(canvas, dtype=np.float64)[:, None] + 0.5
    x = np.arange(canvas, dtype=np.float64)[None, :] + 0.5
    return np.broadcast_to(x, (canvas, canvas)), np.broadcast_to(y, (canvas, canvas))


def _ellipse_alpha(X, Y, cx, cy, rx, ry, aa=1.5):
    d = np.sqrt(((X - cx) / rx) ** 2 + ((Y - cy) / ry) ** 2)
    return np.clip(0.5 + (1.0 - d) * min(rx, ry) / aa, 0.0, 1.0)


def _capsule_alpha(X, Y, p0, p1, radius, aa=1.5):
    vx, vy = p1[0] - p0[0], p1[1] - p0[1]
    denom = max(vx * vx + vy * vy, 1e-12)
    t = np.clip(((X - p0[0]) * vx + (Y - p0[1]) * vy) / denom, 0.0, 1.0)
    dist = np.hypot(X - (p0[0] + t * vx), Y - (p0[1] + t * vy))
    return np.clip(0.5 + (radius - dist) / aa, 0.0, 1.0)


def _blend(img, alpha, color):
    img *= (1.0 - alpha)[:, :, None]
    img += alpha[:, :, None] * np.asarray(color)[None, None, :]


def _landmarks(p: FaceParams):
    pts = np.zeros((81, 2))
    # jaw: lower face arc, left to right (y grows downward)
    theta = np.pi - np.arange(17) * np.pi / 16
    pts[0:17, 0] = p.cx + p.ax * np.cos(theta)
    pts[0:17, 1] = p.cy + p.ay * np.sin(theta)
    # forehead: upper arc, strictly between the jaw endpoints
    theta = np.pi + np.arange(1, 14) * np.pi / 14
    pts[68:81, 0] = p.cx + p.ax * np.cos(theta)
    pts[68:81, 1] = p.cy + p.ay * np.sin(theta)
    # brows: 5-point arcs above each eye
    for side, sl in ((-1, slice(17, 22)), (1, slice(22, 27))):
        bx = p.cx + side * p.eye_dx
        by = p.cy + p.eye_dy + p.brow_dy
        t = np.linspace(-1.0, 1.0, 5)
        pts[sl, 0] = bx + t * p.brow_halfw
        pts[sl, 1] = by - 0.25 * p.brow_halfw * (1 - t ** 2)
    # nose: 4 bridge points + 5 base points
    top = (p.cx, p.cy + p.nose_top_dy)
    tip = (p.cx, p.cy + p.nose_tip_dy)
    t = np.linspace(0.0, 1.0, 4)
    pts[27:31, 0] = top[0] + t * (tip[0] - top[0])
    pts[27:31, 1] = top[1] + t * (tip[1] - top[1])
    t = np.linspace(-1.0, 1.0, 5)
    pts[31:36, 0] = tip[0] + t * p.nose_halfw
    pts[31:36, 1] = tip[1] + 0.12 * p.nose_halfw * (1 - t ** 2)
    # eyes: 6 points around each eye ellipse
    ang = np.arange(6) * np.pi / 3
    for side, sl in ((-1, slice(36, 42)), (1, slice(42, 48))):
        ex = p.cx + side * p.eye_dx
        ey = p.cy + p.eye_dy
        pts[sl, 0] = ex + p.eye_rx * np.cos(ang)
        pts[sl, 1] = ey + p.eye_ry * np.sin(ang)
    # mouth: 12 outer + 8 inner points
    mx, my = p.cx, p.cy + p.mouth_dy
    ang = np.arange(12) * np.pi / 6
    pts[48:60, 0] = mx + p.mouth_rx * np.cos(ang)
    pts[48:60, 1] = my + p.mouth_ry * np.sin(ang)
    ang = np.arange(8) * np.pi / 4
    pts[60:68, 0] = mx + 0.55 * p.mouth_rx * np.cos(ang)
    pts[60:68, 1] = my + 0.55 * p.mouth_ry * np.sin(ang)
    return pts


def generate_face(params: FaceParams):
    """Render one face; returns (image (H, W, 3) float in [0, 1], landmarks)."""
    c = params.canvas
    margin = 2.0
    if (params.cx - params.ax < margin or params.cx + params.ax > c - margin
            or params.cy - params.ay < margin or params.cy + params.ay > c - margin):
        raise ContractError("face ellipse does not fit the canvas")
    X, Y = _grids(c)
    img = np.empty((c, c, 3))
    grad = (Y / c)[:, :, None]
    img[:] = (1 - grad) * np.asarray(params.bg_a) + grad * np.asarray(params.bg_b)

    _blend(img, _ellipse_alpha(X, Y, params.cx, params.cy, params.ax, params.ay),
           params.skin)
    # nose shading first so eyes/mouth draw over it if they ever overlap
    top = (params.cx, params.cy + params.nose_top_dy)
    tip = (params.cx, params.cy + params.nose_tip_dy)
    _blend(img, 0.55 * _capsule_alpha(X, Y, top, tip, 0.28 * params.nose_halfw),
           params.nose_shade)
    base_l = (params.cx - 0.8 * params.nose_halfw, tip[1])
    base_r = (params.cx + 0.8 * params.nose_halfw, tip[1])
    _blend(img, 0.45 * _capsule_alpha(X, Y, base_l, base_r, 0.22 * params.nose_halfw),
           params.nose_shade)
    for side in (-1, 1):
        ex = params.cx + side * params.eye_dx
        ey = params.cy + params.eye_dy
        by = ey + params.brow_dy
        _blend(img, _capsule_alpha(X, Y, (ex - params.brow_halfw * 0.9, by),
                                   (ex + params.brow_halfw * 0.9, by - 1.0),
                                   params.brow_thick), params.brow_color)
        _blend(img, _ellipse_alpha(X, Y, ex, ey, params.eye_rx, params.eye_ry),
               params.sclera)
        _blend(img, _ellipse_alpha(X, Y, ex, ey, params.iris_r, params.iris_r),
               params.iris)
    _blend(img, _ellipse_alpha(X, Y, params.cx, params.cy + params.mouth_dy,
                               params.mouth_rx, params.mouth_ry), params.lip_color)
    mouth_line = 0.6 * _capsule_alpha(
        X, Y, (params.cx - 0.8 * params.mouth_rx, params.cy + params.mouth_dy),
        (params.cx + 0.8 * params.mouth_rx, params.cy + params.mouth_dy), 0.8)
    _blend(img, mouth_line, (0.35, 0.15, 0.18))

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([params.seed, 7])))
    img += params.noise_amp * rng.uniform(-1.0, 1.0, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    return img, _landmarks(params)


# ---------------------------------------------------------------------------
# manipulation families
# ---------------------------------------------------------------------------

@dataclass
class ManipulationFamily:
    name: str
    strength: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.name not in FAMILIES:
            raise ContractError(
                f"unknown manipulation family {self.name!r}; choose from {FAMILIES}")
        if not 0.0 < self.strength <= 1.0:
            raise ContractError(f"strength must be in (0, 1], got {self.strength}")


def _region_mask(lm, region_key, height, width):
    poly = group_landmarks(lm)[region_key]
    return K.polygon_fill(np.ascontiguousarray(poly[:, 0]),
                          np.ascontiguousarray(poly[:, 1]), height, width)


def _local_patch(img, lm, region_key, strength, rng):
    h, w, _ = img.shape
    mask = _region_mask(lm, region_key, h, w).astype(bool)
    period = int(rng.integers(3, 6))
    yy, xx = np.mgrid[0:h, 0:w]
    checker = ((yy // period + xx // period) % 2).astype(np.float64)
    c1 = rng.uniform(0.1, 0.9, size=3)
    c2 = rng.uniform(0.1, 0.9, size=3)
    patch = checker[:, :, None] * c1 + (1 - checker)[:, :, None] * c2
    patch = patch + 0.15 * rng.uniform(-1, 1, size=img.shape)
    out = img.copy()
    blended = np.clip((1 - strength) * img + strength * patch, 0.0, 1.0)
    out[mask] = blended[mask]
    return out


def _global_warp(img, strength, rng):
    h, w, _ = img.shape
    X, Y = _grids(h)
    amp = strength * WARP_MAX_PX
    fy = rng.integers(2, 4)
    fx = rng.integers(2, 4)
    ph1, ph2 = rng.uniform(0, 2 * np.pi, size=2)
    src_y = (Y - 0.5) + amp * np.sin(2 * np.pi * fy * X / w + ph1)
    src_x = (X - 0.5) + amp * np.sin(2 * np.pi * fx * Y / h + ph2)
    out = K.warp_bilinear(np.ascontiguousarray(img),
                          np.ascontiguousarray(src_y),
                          np.ascontiguousarray(src_x))
    out = out + strength * GRAIN_AMP * rng.uniform(-1, 1, size=img.shape)
    return np.clip(out, 0.0, 1.0)


def _global_color(img, strength, rng):
    beta = 0.8 * strength
    # a non-identity channel permutation, otherwise weak strengths degenerate
    perms = np.array([[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]])
    perm = perms[rng.integers(0, len(perms))]
    mix = (1 - beta) * np.eye(3) + beta * np.eye(3)[perm]
    offset = strength * 0.1 * rng.uniform(-1, 1, size=3)
    offset -= offset.mean()     # zero-sum: keeps mean intensity in place
    out = img @ mix.T + offset
    out = out + strength * GRAIN_AMP * rng.uniform(-1, 1, size=img.shape)
    return np.clip(out, 0.0, 1.0)


def apply_manipulation(img, lm, fam: ManipulationFamily):
    """Apply one manipulation family; returns a new image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([fam.seed, _FAMILY_IDS[fam.name], 13])))
    if fam.name == "local-eyes":
        return _local_patch(img, lm, "e", fam.strength, rng)
    if fam.name == "local-mouth":
        return _local_patch(img, lm, "m", fam.strength, rng)
    if fam.name == "global-warp":
        return _global_warp(img, fam.strength, rng)
    if fam.name == "global-color":
        return _global_color(img, fam.strength, rng)
    raise ContractError(f"unknown manipulation family {fam.name!r}")


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    root: str = "."

    def split(self, name):
        return [r for r in self.records if r["split"] == name]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True))
                fh.write("\n")

    @classmethod
    def load(cls, path):
        records = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
        return cls(records=records, root=os.path.dirname(os.path.abspath(path)))


def _image_rng(ds_seed, split, family, idx):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        [ds_seed, _SPLIT_IDS[split], _FAMILY_IDS.get(family, 9), idx])))


def _make_record(cfg, out_dir, split, family, idx, label):
    rng = _image_rng(cfg.seed, split, family, idx)
    params = FaceParams.sample(rng, canvas=cfg.canvas)
    img, lm = generate_face(params)
    if label == "fake":
        per_image_strength = cfg.strengths[family] * rng.uniform(0.6, 1.0)
        fam = ManipulationFamily(name=family, strength=per_image_strength,
                                 seed=int(rng.integers(0, 2 ** 31)))
        img = apply_manipulation(img, lm, fam)
    stem = f"{split}_{family}_{idx:05d}"
    img_rel = os.path.join("images", f"{stem}.png")
    lm_rel = os.path.join("landmarks", f"{stem}.txt")
    save_image(os.path.join(out_dir, img_rel), img)
    save_landmarks(os.path.join(out_dir, lm_rel), lm)
    return {"image": img_rel, "landmarks": lm_rel, "label": label,
            "family": family, "split": split}


def generate_dataset(cfg: DatasetConfig, out_dir):
    """Write images, landmark files, and a JSONL manifest.

    Splits are disjoint by construction: every image's randomness derives
    from (dataset seed, split, family, index). With ``leave_out`` set, the
    held-out family appears only in the dedicated unseen-test split (with
    its own fresh reals), mirroring the leave-one-method-out protocol.
    """
    if cfg.leave_out is not None and cfg.leave_out not in cfg.families:
        raise ContractError(
            f"leave_out family {cfg.leave_out!r} not in {cfg.families}")
    for name in cfg.families:
        if name not in _FAMILY_IDS:
            raise ContractError(f"unknown family {name!r}")
    seen = [f for f in cfg.families if f != cfg.leave_out]
    if not seen:
        raise ContractError("at least one manipulation family must stay in training")
    for sub in ("images", "landmarks"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    counts = {"train": cfg.train_per_family, "val": cfg.val_per_family,
              "test": cfg.test_per_family}
    records = []
    for split, per_family in counts.items():
        if per_family < 0:
            raise ContractError(f"negative count for split {split}")
        for family in seen:
            for idx in range(per_family):
                records.append(_make_record(cfg, out_dir, split, family, idx, "fake"))
        n_real = per_family * len(seen)
        for idx in range(n_real):
            records.append(_make_record(cfg, out_dir, split, "real", idx, "real"))
    if cfg.leave_out is not None:
        n_unseen = cfg.test_per_family
        for idx in range(n_unseen):
            records.append(_make_record(cfg, out_dir, "unseen-test",
                                        cfg.leave_out, idx, "fake"))
        for idx in range(n_unseen):
            records.append(_make_record(cfg, out_dir, "unseen-test", "real",
                                        idx, "real"))
    manifest = DatasetManifest(records=records, root=os.path.abspath(out_dir))
    manifest.save(os.path.join(out_dir, "manifest.jsonl"))
    return manifest
