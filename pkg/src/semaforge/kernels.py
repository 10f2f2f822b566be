"""Hot numeric kernels: convolution, polygon fill, bilinear resampling.

Each kernel exists twice: a loop version compiled with numba ``@njit`` and a
vectorized pure-numpy fallback. The active set is chosen once at import time
from the ``SEMAFORGE_BACKEND`` environment variable (``numba`` or ``numpy``;
default is numba when importable). The polygon and resampling pairs evaluate
the same floating-point expressions element by element, so the two backends
produce bit-identical output; the convolution pair differs only in summation
order (loop accumulation vs einsum).

All float kernels operate on contiguous float64 arrays.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_requested = os.environ.get("SEMAFORGE_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise RuntimeError(
        f"SEMAFORGE_BACKEND must be 'numba' or 'numpy', got {_requested!r}"
    )

if _requested != "numpy":
    try:
        from numba import njit

        HAS_NUMBA = True
    except ImportError:
        if _requested == "numba":
            raise
        HAS_NUMBA = False
else:
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _requested != "numpy"


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def conv2d_forward_np(x, k, b):
    """Same-padded stride-1 cross-correlation.

    x: (N, H, W, Ci), k: (K, K, Ci, Co) with K odd, b: (Co,) -> (N, H, W, Co).
    """
    ksize = k.shape[0]
    pad = ksize // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (ksize, ksize), axis=(1, 2))
    return np.einsum("nijcuv,uvco->nijo", win, k, optimize=True) + b


def conv2d_backward_input_np(gy, k):
    """Gradient of conv2d_forward w.r.t. its input."""
    ksize = k.shape[0]
    pad = ksize // 2
    gp = np.pad(gy, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(gp, (ksize, ksize), axis=(1, 2))
    kflip = k[::-1, ::-1]
    return np.einsum("nijouv,uvco->nijc", win, kflip, optimize=True)


def conv2d_backward_kernel_np(x, gy, ksize):
    """Gradient of conv2d_forward w.r.t. the kernel."""
    pad = ksize // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (ksize, ksize), axis=(1, 2))
    return np.einsum("nijcuv,nijo->uvco", win, gy, optimize=True)


def polygon_fill_np(xs, ys, height, width):
    """Even-odd fill of a closed polygon over pixel centers.

    A pixel (r, c) is inside when the center (c + 0.5, r + 0.5) passes the
    even-odd crossing test against edges (i-1, i). Returns uint8 (H, W).
    """
    py = np.arange(height, dtype=np.float64) + 0.5
    px = np.arange(width, dtype=np.float64) + 0.5
    inside = np.zeros((height, width), dtype=bool)
    n = xs.shape[0]
    for i in range(n):
        xi, yi = xs[i], ys[i]
        xj, yj = xs[i - 1], ys[i - 1]
        cond = (yi > py) != (yj > py)
        if not cond.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = xi + (py - yi) * (xj - xi) / (yj - yi)
        inside ^= cond[:, None] & (px[None, :] < xint[:, None])
    return inside.astype(np.uint8)


def resize_bilinear_np(img, out_h, out_w):
    """Bilinear resize of (H, W, C) float64, half-pixel-center convention."""
    h, w, _ = img.shape
    sy = h / out_h
    sx = w / out_w
    fy = (np.arange(out_h, dtype=np.float64) + 0.5) * sy - 0.5
    fx = (np.arange(out_w, dtype=np.float64) + 0.5) * sx - 0.5
    y0 = np.floor(fy)
    x0 = np.floor(fx)
    ty = fy - y0
    tx = fx - x0
    y0c = np.clip(y0.astype(np.int64), 0, h - 1)
    y1c = np.clip(y0.astype(np.int64) + 1, 0, h - 1)
    x0c = np.clip(x0.astype(np.int64), 0, w - 1)
    x1c = np.clip(x0.astype(np.int64) + 1, 0, w - 1)
    a = img[y0c[:, None], x0c[None, :]]
    b = img[y0c[:, None], x1c[None, :]]
    c = img[y1c[:, None], x0c[None, :]]
    d = img[y1c[:, None], x1c[None, :]]
    txg = tx[None, :, None]
    tyg = ty[:, None, None]
    top = a + (b - a) * txg
    bot = c + (d - c) * txg
    return top + (bot - top) * tyg


def warp_bilinear_np(img, src_y, src_x):
    """Sample (H, W, C) at float coordinate grids src_y/src_x (H, W)."""
    h, w, _ = img.shape
    y0 = np.floor(src_y)
    x0 = np.floor(src_x)
    ty = src_y - y0
    tx = src_x - x0
    y0c = np.clip(y0.astype(np.int64), 0, h - 1)
    y1c = np.clip(y0.astype(np.int64) + 1, 0, h - 1)
    x0c = np.clip(x0.astype(np.int64), 0, w - 1)
    x1c = np.clip(x0.astype(np.int64) + 1, 0, w - 1)
    a = img[y0c, x0c]
    b = img[y0c, x1c]
    c = img[y1c, x0c]
    d = img[y1c, x1c]
    txg = tx[..., None]
    tyg = ty[..., None]
    top = a + (b - a) * txg
    bot = c + (d - c) * txg
    return top + (bot - top) * tyg


# ---------------------------------------------------------------------------
# numba implementations (same contracts as above)
# ---------------------------------------------------------------------------

def _conv2d_forward_loops(x, k, b):
    n_im, h, w, cin = x.shape
    ksize = k.shape[0]
    cout = k.shape[3]
    pad = ksize // 2
    y = np.empty((n_im, h, w, cout), dtype=np.float64)
    for n in range(n_im):
        for i in range(h):
            for j in range(w):
                for co in range(cout):
                    acc = b[co]
                    for u in range(ksize):
                        ii = i + u - pad
                        if ii < 0 or ii >= h:
                            continue
                        for v in range(ksize):
                            jj = j + v - pad
                            if jj < 0 or jj >= w:
                                continue
                            for ci in range(cin):
                                acc += x[n, ii, jj, ci] * k[u, v, ci, co]
                    y[n, i, j, co] = acc
    return y


def _conv2d_backward_input_loops(gy, k):
    n_im, h, w, cout = gy.shape
    ksize = k.shape[0]
    cin = k.shape[2]
    pad = ksize // 2
    gx = np.empty((n_im, h, w, cin), dtype=np.float64)
    for n in range(n_im):
        for a in range(h):
            for bb in range(w):
                for ci in range(cin):
                    acc = 0.0
                    for u in range(ksize):
                        ii = a + pad - u
                        if ii < 0 or ii >= h:
                            continue
                        for v in range(ksize):
                            jj = bb + pad - v
                            if jj < 0 or jj >= w:
                                continue
                            for co in range(cout):
                                acc += gy[n, ii, jj, co] * k[u, v, ci, co]
                    gx[n, a, bb, ci] = acc
    return gx


def _conv2d_backward_kernel_loops(x, gy, ksize):
    n_im, h, w, cin = x.shape
    cout = gy.shape[3]
    pad = ksize // 2
    gk = np.zeros((ksize, ksize, cin, cout), dtype=np.float64)
    for n in range(n_im):
        for i in range(h):
            for j in range(w):
                for u in range(ksize):
                    ii = i + u - pad
                    if ii < 0 or ii >= h:
                        continue
                    for v in range(ksize):
                        jj = j + v - pad
                        if jj < 0 or jj >= w:
                            continue
                        for ci in range(cin):
                            xv = x[n, ii, jj, ci]
                            for co in range(cout):
                                gk[u, v, ci, co] += xv * gy[n, i, j, co]
    return gk


def _polygon_fill_loops(xs, ys, height, width):
    mask = np.zeros((height, width), dtype=np.uint8)
    n = xs.shape[0]
    for r in range(height):
        py = r + 0.5
        for c in range(width):
            px = c + 0.5
            inside = False
            j = n - 1
            for i in range(n):
                yi = ys[i]
                yj = ys[j]
                if (yi > py) != (yj > py):
                    xint = xs[i] + (py - yi) * (xs[j] - xs[i]) / (yj - yi)
                    if px < xint:
                        inside = not inside
                j = i
            if inside:
                mask[r, c] = 1
    return mask


def _resize_bilinear_loops(img, out_h, out_w):
    h, w, ch = img.shape
    sy = h / out_h
    sx = w / out_w
    out = np.empty((out_h, out_w, ch), dtype=np.float64)
    for i in range(out_h):
        fy = (i + 0.5) * sy - 0.5
        y0 = int(np.floor(fy))
        ty = fy - y0
        y0c = min(max(y0, 0), h - 1)
        y1c = min(max(y0 + 1, 0), h - 1)
        for j in range(out_w):
            fx = (j + 0.5) * sx - 0.5
            x0 = int(np.floor(fx))
            tx = fx - x0
            x0c = min(max(x0, 0), w - 1)
            x1c = min(max(x0 + 1, 0), w - 1)
            for c in range(ch):
                a = img[y0c, x0c, c]
                b = img[y0c, x1c, c]
                cc = img[y1c, x0c, c]
                d = img[y1c, x1c, c]
                top = a + (b - a) * tx
                bot = cc + (d - cc) * tx
                out[i, j, c] = top + (bot - top) * ty
    return out


def _warp_bilinear_loops(img, src_y, src_x):
    h, w, ch = img.shape
    out = np.empty((h, w, ch), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            fy = src_y[i, j]
            fx = src_x[i, j]
            y0 = int(np.floor(fy))
            x0 = int(np.floor(fx))
            ty = fy - y0
            tx = fx - x0
            y0c = min(max(y0, 0), h - 1)
            y1c = min(max(y0 + 1, 0), h - 1)
            x0c = min(max(x0, 0), w - 1)
            x1c = min(max(x0 + 1, 0), w - 1)
            for c in range(ch):
                a = img[y0c, x0c, c]
                b = img[y0c, x1c, c]
                cc = img[y1c, x0c, c]
                d = img[y1c, x1c, c]
                top = a + (b - a) * tx
                bot = cc + (d - cc) * tx
                out[i, j, c] = top + (bot - top) * ty
    return out


if HAS_NUMBA:
    _jit = njit(cache=True, nogil=True)
    conv2d_forward_nb = _jit(_conv2d_forward_loops)
    conv2d_backward_input_nb = _jit(_conv2d_backward_input_loops)
    conv2d_backward_kernel_nb = _jit(_conv2d_backward_kernel_loops)
    polygon_fill_nb = _jit(_polygon_fill_loops)
    resize_bilinear_nb = _jit(_resize_bilinear_loops)
    warp_bilinear_nb = _jit(_warp_bilinear_loops)

if USE_NUMBA:
    conv2d_forward = conv2d_forward_nb
    conv2d_backward_input = conv2d_backward_input_nb
    conv2d_backward_kernel = conv2d_backward_kernel_nb
    polygon_fill = polygon_fill_nb
    resize_bilinear = resize_bilinear_nb
    warp_bilinear = warp_bilinear_nb
else:
    conv2d_forward = conv2d_forward_np
    conv2d_backward_input = conv2d_backward_input_np
    conv2d_backward_kernel = conv2d_backward_kernel_np
    polygon_fill = polygon_fill_np
    resize_bilinear = resize_bilinear_np
    warp_bilinear = warp_bilinear_np


def backend_name():
    """Active kernel backend, 'numba' or 'numpy'."""
    return "numba" if USE_NUMBA else "numpy"


def warmup():
    """Trigger JIT compilation of every kernel on tiny inputs."""
    x = np.ones((1, 4, 4, 2))
    k = np.ones((3, 3, 2, 1))
    b = np.zeros(1)
    gy = conv2d_forward(x, k, b)
    conv2d_backward_input(gy, k)
    conv2d_backward_kernel(x, gy, 3)
    xs = np.array([1.0, 3.0, 2.0])
    ys = np.array([1.0, 1.0, 3.0])
    polygon_fill(xs, ys, 4, 4)
    resize_bilinear(x[0], 2, 2)
    grid = np.zeros((4, 4))
    warp_bilinear(x[0], grid, grid)
