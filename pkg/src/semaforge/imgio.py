"""File IO for images, masks, and landmark text files."""

import numpy as np
from PIL import Image

from .errors import LandmarkFormatError

N_LANDMARKS = 81


def load_image(path):
    """Load an RGB image as float64 in [0, 1], shape (H, W, 3)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path, img):
    """Save a float [0, 1] (H, W, 3) array as 8-bit PNG."""
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


def save_gray(path, img):
    """Save a float [0, 1] (H, W) or (H, W, 1) array as 8-bit grayscale."""
    a = np.asarray(img)
    if a.ndim == 3:
        a = a[:, :, 0]
    q = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path)


def save_mask_pgm(path, mask):
    """Write a binary mask as a P5 PGM (0 or 255)."""
    m = np.asarray(mask, dtype=np.uint8)
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((m * 255).tobytes())


def save_landmarks(path, points):
    """Write landmarks as 81 lines of 'x y' with full float precision."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape != (N_LANDMARKS, 2):
        raise LandmarkFormatError(
            f"expected {N_LANDMARKS} landmarks, found {pts.shape[0]}")
    with open(path, "w", encoding="ascii") as fh:
        for x, y in pts:
            fh.write(f"{float(x)!r} {float(y)!r}\n")


def load_landmarks(path):
    """Parse an 81-line 'x y' landmark file into an (81, 2) float array."""
    points = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise LandmarkFormatError(
                    f"{path}:{lineno}: expected 'x y', got {line!r}")
            try:
                points.append((float(parts[0]), float(parts[1])))
            except ValueError:
                raise LandmarkFormatError(
                    f"{path}:{lineno}: non-numeric coordinate in {line!r}")
    if len(points) != N_LANDMARKS:
        raise LandmarkFormatError(
            f"expected {N_LANDMARKS} landmarks, found {len(points)}")
    return np.asarray(points, dtype=np.float64)
