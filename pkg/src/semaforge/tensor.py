"""Dense float64 tensors with reverse-mode automatic differentiation.

A dynamic tape: every operation records its parents and a closure that
propagates the output gradient back to them. ``backward`` on a scalar walks
the tape once in reverse topological order; calling it again on the same
root raises. Gradient flow can be suspended with the ``no_grad`` context.

Set ``SEMAFORGE_DEBUG=1`` to assert that every op output is finite.
"""

import os
import threading
from contextlib import contextmanager

import numpy as np

from . import kernels as K
from .errors import ContractError, DimensionError, GraphStateError

DEBUG_CHECK_FINITE = os.environ.get("SEMAFORGE_DEBUG", "") not in ("", "0")

# tape recording is toggled per thread: worker threads own their own tapes
_tls = threading.local()

# sigmoid outputs are clamped into the largest open (0, 1) interval float64
# can represent, so saturation never rounds to an exact 0 or 1
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)

LOG_FLOOR = 1e-12


@contextmanager
def no_grad():
    """Disable tape recording inside the block (current thread only)."""
    prev = grad_enabled()
    _tls.grad_enabled = False
    try:
        yield
    finally:
        _tls.grad_enabled = prev


def grad_enabled():
    return getattr(_tls, "grad_enabled", True)


class Tensor:
    """A numpy float64 array plus an optional gradient and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op",
                 "_consumed")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to 1-d
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _scalar_err(t):
    raise ContractError(f"expected a scalar tensor, got shape {t.data.shape}")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    """Wrap an op result, recording tape linkage when grad is enabled."""
    out = Tensor(data)
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise ContractError(f"non-finite values produced by op '{op}'")
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum gradient g down to the given operand shape (inverse broadcast)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise DimensionError(f"div: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward, "div")


def scale(a, s):
    """Multiply by a python scalar."""
    a = as_tensor(a)
    s = float(s)
    data = a.data * s

    def backward(g):
        _accum(a, g * s)

    return _make(data, (a,), backward, "scale")


def hadamard(a, h):
    """Gate a (..., H, W, C) map with a single-channel (..., H, W, 1) map."""
    a, h = as_tensor(a), as_tensor(h)
    if a.data.ndim != h.data.ndim or a.data.shape[:-1] != h.data.shape[:-1]:
        raise DimensionError(
            f"hadamard: spatial shapes differ, {a.shape} vs {h.shape}")
    if h.data.shape[-1] != 1:
        raise DimensionError(
            f"hadamard: gate must have one channel, got shape {h.shape}")
    return mul(a, h)


def relu(a):
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0.0))

    return _make(data, (a,), backward, "relu")


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    # two-branch form never exponentiates a positive argument
    pos = x >= 0
    z = np.exp(np.where(pos, -x, x))
    s = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))
    s = np.clip(s, _SIG_LO, _SIG_HI)

    def backward(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), backward, "sigmoid")


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _make(data, (a,), backward, "exp")


def log(a, floor=LOG_FLOOR):
    """Natural log with the argument clamped below at ``floor``."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, floor)
    data = np.log(clamped)

    def backward(g):
        _accum(a, np.where(a.data > floor, g / clamped, 0.0))

    return _make(data, (a,), backward, "log")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(data, (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(data, (a,), backward, "reshape")


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(data, tuple(tensors), backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x, kernel, bias):
    """Same-padded stride-1 convolution over (H, W, Ci) or (N, H, W, Ci)."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if kernel.data.ndim != 4 or kernel.data.shape[0] != kernel.data.shape[1]:
        raise DimensionError(f"conv2d: kernel must be (K, K, Ci, Co), got {kernel.shape}")
    if kernel.data.shape[0] % 2 != 1:
        raise DimensionError(f"conv2d: kernel size must be odd, got {kernel.shape[0]}")
    batched = x.data.ndim == 4
    if not batched and x.data.ndim != 3:
        raise DimensionError(f"conv2d: input must be 3-D or 4-D, got {x.shape}")
    cin = x.data.shape[-1]
    if cin != kernel.data.shape[2]:
        raise DimensionError(
            f"conv2d: input channels {cin} do not match kernel {kernel.shape}")
    if bias.data.shape != (kernel.data.shape[3],):
        raise DimensionError(
            f"conv2d: bias shape {bias.shape} does not match out channels {kernel.data.shape[3]}")
    x4 = x.data if batched else x.data[np.newaxis]
    y = K.conv2d_forward(x4, kernel.data, bias.data)
    ksize = kernel.data.shape[0]

    def backward(g):
        g4 = np.ascontiguousarray(g if batched else g[np.newaxis])
        if x.requires_grad:
            gx = K.conv2d_backward_input(g4, kernel.data)
            _accum(x, gx if batched else gx[0])
        if kernel.requires_grad:
            _accum(kernel, K.conv2d_backward_kernel(x4, g4, ksize))
        if bias.requires_grad:
            _accum(bias, g4.sum(axis=(0, 1, 2)))

    return _make(y if batched else y[0], (x, kernel, bias), backward, "conv2d")


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool2x2(x):
    """2x2 stride-2 max pooling over (N, H, W, C); ties route to the first cell."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2x2: expected (N, H, W, C), got {x.shape}")
    n, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ContractError(f"maxpool2x2: spatial dims must be even, got {h}x{w}")
    win = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    win = win.reshape(n, h // 2, w // 2, 4, c)
    idx = win.argmax(axis=3)
    data = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward(g):
        gw = np.zeros((n, h // 2, w // 2, 4, c))
        np.put_along_axis(gw, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        gx = gw.reshape(n, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
        _accum(x, gx.reshape(n, h, w, c))

    return _make(data, (x,), backward, "maxpool2x2")


def _pool_bins(n_in, n_out):
    edges = (np.arange(n_out + 1) * n_in) // n_out
    return edges.astype(np.int64)


def adaptive_avg_pool(x, out_h=32, out_w=32):
    """Average-pool (..., H, W, C) into an (out_h x out_w) grid of bin means.

    Rows and columns are split into contiguous near-equal bins
    [floor(i*H/out), floor((i+1)*H/out)). Requires H >= out_h and W >= out_w.
    """
    x = as_tensor(x)
    batched = x.data.ndim == 4
    if not batched and x.data.ndim != 3:
        raise DimensionError(f"adaptive_avg_pool: expected 3-D or 4-D input, got {x.shape}")
    x4 = x.data if batched else x.data[np.newaxis]
    n, h, w, c = x4.shape
    if h < out_h or w < out_w:
        raise ContractError(
            f"adaptive_avg_pool: input {h}x{w} smaller than output {out_h}x{out_w}; "
            "upscale the fragment first")
    re = _pool_bins(h, out_h)
    ce = _pool_bins(w, out_w)
    rows = np.add.reduceat(x4, re[:-1], axis=1)
    pooled = np.add.reduceat(rows, ce[:-1], axis=2)
    rcnt = np.diff(re).astype(np.float64)
    ccnt = np.diff(ce).astype(np.float64)
    area = rcnt[:, None] * ccnt[None, :]
    data = pooled / area[None, :, :, None]

    def backward(g):
        g4 = g if batched else g[np.newaxis]
        gin = (g4 / area[None, :, :, None]).repeat(np.diff(re), axis=1)
        gin = gin.repeat(np.diff(ce), axis=2)
        _accum(x, gin if batched else gin[0])

    return _make(data if batched else data[0], (x,), backward, "adaptive_avg_pool")


# ---------------------------------------------------------------------------
# classification heads
# ---------------------------------------------------------------------------

def softmax(logits):
    """Row-wise softmax over the last axis, stabilized by max subtraction."""
    t = as_tensor(logits)
    z = t.data
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accum(t, p * (g - dot))

    return _make(p, (t,), backward, "softmax")


def cross_entropy(probs, labels, floor=LOG_FLOOR):
    """Negative log-likelihood of the true class.

    ``probs`` is (2,) with an int label, or (N, 2) with an (N,) label array;
    the batched form returns the mean. The picked probability is clamped
    below at ``floor`` before the log.
    """
    t = as_tensor(probs)
    y = np.asarray(labels)
    if t.data.ndim == 1:
        p2 = t.data[np.newaxis]
        yv = y.reshape(1)
    elif t.data.ndim == 2:
        p2 = t.data
        yv = y.reshape(-1)
    else:
        raise DimensionError(f"cross_entropy: expected (C,) or (N, C), got {t.shape}")
    if yv.shape[0] != p2.shape[0]:
        raise ContractError(
            f"cross_entropy: {p2.shape[0]} rows but {yv.shape[0]} labels")
    if not np.issubdtype(yv.dtype, np.integer) or yv.min() < 0 or yv.max() >= p2.shape[1]:
        raise ContractError(f"cross_entropy: labels must be ints in [0, {p2.shape[1]})")
    n = p2.shape[0]
    picked = p2[np.arange(n), yv]
    clamped = np.maximum(picked, floor)
    data = np.array(-np.log(clamped).sum() / n)

    def backward(g):
        gp = np.zeros_like(p2)
        gp[np.arange(n), yv] = np.where(picked > floor, -1.0 / (n * clamped), 0.0) * float(g)
        _accum(t, gp if t.data.ndim == 2 else gp[0])

    return _make(data, (t,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# backward traversal
# ---------------------------------------------------------------------------

def backward(loss):
    """Populate gradients of every requires_grad tensor reachable from loss."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward: loss must be a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphStateError("backward: this graph was already traversed; "
                              "rebuild the forward pass before calling again")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
    loss._consumed = True


def gradient_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. Per coordinate the error is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ContractError(f"gradient_check: f must be scalar-valued, got {out.shape}")
    backward(out)
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad.copy()

    def eval_at(arr):
        with no_grad():
            return float(f(Tensor(arr)).data)

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        pert = base.copy().reshape(-1)
        pert[i] = orig + eps
        fp = eval_at(pert.reshape(base.shape))
        pert[i] = orig - eps
        fm = eval_at(pert.reshape(base.shape))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ContractError(
                f"gradient_check: non-finite output when perturbing coordinate {i}")
        nflat[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
