"""Facial semantic segmentation: 81 landmarks -> six region fragments.

The six regions are keyed by single letters: p (whole picture), b
(background), f (face), e (eyes, including brows), n (nose), m (mouth).
``FRAGMENTS`` fixes the canonical ordering used by the probability and
weight matrices downstream.

The landmark layout follows the common 81-point convention: 0-16 jaw,
17-26 brows, 27-35 nose, 36-47 eyes, 48-67 mouth, 68-80 forehead. The
grouping below is a declared convention (one table, easy to swap).
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import ContractError, FragmentError, GeometryError
from .imgio import load_landmarks, save_landmarks  # re-exported  # noqa: F401

FRAGMENTS = ("p", "b", "f", "e", "m", "n")

FRAGMENT_NAMES = {
    "p": "picture",
    "b": "background",
    "f": "face",
    "e": "eyes",
    "m": "mouth",
    "n": "nose",
}

# landmark index ranges per region (inclusive start, exclusive end)
GROUP_INDEX_TABLE = {
    "jaw": (0, 17),
    "brows": (17, 27),
    "nose": (27, 36),
    "eyes": (36, 48),
    "mouth": (48, 68),
    "forehead": (68, 81),
}

# hulls per fragment are built over these landmark indices
REGION_POINTS = {
    "f": np.arange(0, 81),
    "e": np.arange(17, 48),   # brows + both eyes
    "n": np.arange(27, 36),
    "m": np.arange(48, 68),
}

# dilation margin as a fraction of the face-hull bounding-box diagonal
DILATION_FRACTION = 0.05

DEFAULT_FRAGMENT_SIZE = 64


def validate_landmarks(points, height, width, tol=2.0):
    """Check the 81-point set lies within the image up to ``tol`` pixels.

    Returns the points clamped into image bounds.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape != (81, 2):
        raise ContractError(f"expected (81, 2) landmarks, got {pts.shape}")
    if (pts[:, 0] < -tol).any() or (pts[:, 0] > width + tol).any() \
            or (pts[:, 1] < -tol).any() or (pts[:, 1] > height + tol).any():
        raise ContractError("landmarks fall outside the image beyond tolerance")
    out = pts.copy()
    out[:, 0] = np.clip(out[:, 0], 0.0, width)
    out[:, 1] = np.clip(out[:, 1], 0.0, height)
    return out


def convex_hull(points):
    """Convex hull (counter-clockwise in x-right/y-down coords) by monotone chain."""
    pts = sorted({(float(x), float(y)) for x, y in np.asarray(points)})
    if len(pts) < 3:
        raise GeometryError(f"hull needs >= 3 distinct points, got {len(pts)}")

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) > 1 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(pts):
        while len(upper) > 1 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise GeometryError("hull is degenerate (points are collinear)")
    return np.asarray(hull, dtype=np.float64)


def dilate_polygon(poly, margin):
    """Grow a convex polygon by pushing each vertex ``margin`` away from the
    centroid, then re-hulling."""
    poly = np.asarray(poly, dtype=np.float64)
    centroid = poly.mean(axis=0)
    vec = poly - centroid
    norm = np.sqrt((vec ** 2).sum(axis=1))
    norm = np.maximum(norm, 1e-12)
    moved = poly + vec / norm[:, None] * margin
    return convex_hull(moved)


@dataclass
class FragmentMaskSet:
    """Six binary (H, W) uint8 masks keyed by fragment letter."""

    masks: dict
    height: int
    width: int
    warnings: list = field(default_factory=list)

    def __getitem__(self, key):
        return self.masks[key]


def group_landmarks(points):
    """Map landmarks to region polygons.

    face = hull of all 81 points (undilated); eyes/nose/mouth = hulls of
    their index groups grown by 5% of the face bounding-box diagonal.
    Background and picture need no polygon (complement / full rectangle).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape != (81, 2):
        raise ContractError(f"expected (81, 2) landmarks, got {pts.shape}")
    face = convex_hull(pts[REGION_POINTS["f"]])
    bbox_wh = face.max(axis=0) - face.min(axis=0)
    margin = DILATION_FRACTION * float(np.hypot(*bbox_wh))
    polys = {"f": face}
    for key in ("e", "n", "m"):
        hull = convex_hull(pts[REGION_POINTS[key]])
        polys[key] = dilate_polygon(hull, margin)
    return polys


def _clip_warning(poly, height, width):
    xs, ys = poly[:, 0], poly[:, 1]
    return xs.min() < 0 or ys.min() < 0 or xs.max() > width or ys.max() > height


def rasterize_masks(polys, height, width):
    """Fill region polygons into a FragmentMaskSet.

    Invariants hold by construction: p is all ones, b is the exact
    complement of f, and e/n/m are intersected with f (dilation can push a
    feature hull slightly past the face outline).
    """
    if height < 1 or width < 1:
        raise ContractError(f"mask size must be >= 1x1, got {height}x{width}")
    warnings = []
    f = K.polygon_fill(np.ascontiguousarray(polys["f"][:, 0]),
                       np.ascontiguousarray(polys["f"][:, 1]), height, width)
    masks = {
        "p": np.ones((height, width), dtype=np.uint8),
        "f": f,
        "b": (1 - f).astype(np.uint8),
    }
    for key in ("e", "n", "m"):
        poly = polys[key]
        raw = K.polygon_fill(np.ascontiguousarray(poly[:, 0]),
                             np.ascontiguousarray(poly[:, 1]), height, width)
        masks[key] = (raw & f).astype(np.uint8)
        if _clip_warning(poly, height, width):
            warnings.append(f"{key} polygon clipped to image bounds")
    if _clip_warning(polys["f"], height, width):
        warnings.append("f polygon clipped to image bounds")
    return FragmentMaskSet(masks=masks, height=height, width=width, warnings=warnings)


@dataclass
class FragmentSet:
    """Six S x S x 3 float crops keyed by fragment letter."""

    crops: dict
    size: int
    source_id: str = ""

    def __getitem__(self, key):
        return self.crops[key]


def _mask_bbox(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0 or cols.size == 0:
        return None
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def extract_fragments(img, maskset, size=DEFAULT_FRAGMENT_SIZE, source_id=""):
    """Cut the six fragments out of an image.

    Per fragment: zero pixels outside the mask, crop to the mask bounding
    box (whole image for b and p), and resize to size x size bilinearly.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"expected (H, W, 3) image, got {img.shape}")
    if img.shape[:2] != (maskset.height, maskset.width):
        raise ContractError(
            f"image {img.shape[:2]} and masks {(maskset.height, maskset.width)} differ")
    if size < 32:
        raise ContractError(f"fragment size must be >= 32, got {size}")
    crops = {}
    for key in FRAGMENTS:
        mask = maskset[key]
        masked = img * mask[:, :, None]
        if key in ("b", "p"):
            region = masked
        else:
            bbox = _mask_bbox(mask)
            if bbox is None:
                raise FragmentError(
                    f"fragment '{key}' ({FRAGMENT_NAMES[key]}) has an empty mask")
            r0, r1, c0, c1 = bbox
            region = masked[r0:r1, c0:c1]
        if region.shape[0] == size and region.shape[1] == size:
            crops[key] = region.copy()
        else:
            crops[key] = K.resize_bilinear(np.ascontiguousarray(region), size, size)
    return FragmentSet(crops=crops, size=size, source_id=source_id)


def segment_image(img, landmarks, size=DEFAULT_FRAGMENT_SIZE, source_id=""):
    """Full pipeline: landmarks -> polygons -> masks -> fragments."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    pts = validate_landmarks(landmarks, h, w)
    polys = group_landmarks(pts)
    masks = rasterize_masks(polys, h, w)
    frags = extract_fragments(img, masks, size=size, source_id=source_id)
    return masks, frags
