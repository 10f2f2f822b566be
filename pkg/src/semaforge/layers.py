"""Neural network layers and the SGD-with-momentum optimizer.

Layers hold their parameters as ``Tensor`` objects with ``requires_grad``
set, expose ``params()`` as (name, tensor) pairs for the optimizer and the
checkpoint writer, and ``state()`` for non-trainable buffers (batch-norm
running statistics).
"""

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


def he_init(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class ConvLayer:
    """3x3 same-padded stride-1 convolution, (H, W, Cin) -> (H, W, Cout)."""

    def __init__(self, cin, cout, rng, ksize=3, name="conv"):
        self.name = name
        fan_in = ksize * ksize * cin
        self.kernel = Tensor(he_init(rng, (ksize, ksize, cin, cout), fan_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return T.conv2d(x, self.kernel, self.bias)

    def params(self):
        return [(f"{self.name}.kernel", self.kernel), (f"{self.name}.bias", self.bias)]

    def state(self):
        return []


class BatchNormLayer:
    """Per-channel batch normalization over (N, H, W, C).

    In train mode the activations are standardized with the batch mean and a
    floored variance max(var, eps); eval mode uses running statistics. The
    eps acts as a variance floor (not an additive term) so a batch whose
    variance is well above eps is normalized exactly to unit variance, and a
    constant batch maps to zero instead of dividing by zero.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, name="bn"):
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        # the first train batch seeds the running stats outright; a plain
        # EMA from (0, 1) leaves percent-level init bias after dozens of
        # batches, enough to miscalibrate eval mode in short trainings
        self._seeded = False

    def __call__(self, x, training):
        xt = T.as_tensor(x)
        batched = xt.data.ndim == 4
        if not batched and xt.data.ndim != 3:
            raise DimensionError(f"batchnorm: expected 3-D or 4-D input, got {xt.shape}")
        x4 = xt.data if batched else xt.data[np.newaxis]
        n, h, w, c = x4.shape
        if c != self.gamma.data.shape[0]:
            raise DimensionError(
                f"batchnorm: {c} channels but layer has {self.gamma.data.shape[0]}")
        axes = (0, 1, 2)
        gamma, beta = self.gamma, self.beta

        if training:
            if n < 2:
                raise ContractError(
                    "batchnorm: train mode needs batch size >= 2 (variance degenerate)")
            mu = x4.mean(axis=axes)
            var = x4.var(axis=axes)
            floored = np.maximum(var, self.eps)
            std = np.sqrt(floored)
            xhat = (x4 - mu) / std
            if self._seeded:
                m = self.momentum
                self.running_mean += m * (mu - self.running_mean)
                self.running_var += m * (var - self.running_var)
            else:
                self.running_mean[:] = mu
                self.running_var[:] = var
                self._seeded = True
            count = n * h * w

            def backward(g):
                g4 = g if batched else g[np.newaxis]
                if gamma.requires_grad:
                    T._accum(gamma, (g4 * xhat).sum(axis=axes))
                if beta.requires_grad:
                    T._accum(beta, g4.sum(axis=axes))
                if xt.requires_grad:
                    gy = g4 * gamma.data
                    mean_gy = gy.sum(axis=axes) / count
                    mean_gy_xhat = (gy * xhat).sum(axis=axes) / count
                    # where the variance was floored, std does not depend on x
                    xterm = np.where(var > self.eps, mean_gy_xhat, 0.0)
                    gx = (gy - mean_gy - xhat * xterm) / std
                    T._accum(xt, gx if batched else gx[0])
        else:
            std = np.sqrt(np.maximum(self.running_var, self.eps))
            xhat = (x4 - self.running_mean) / std

            def backward(g):
                g4 = g if batched else g[np.newaxis]
                if gamma.requires_grad:
                    T._accum(gamma, (g4 * xhat).sum(axis=axes))
                if beta.requires_grad:
                    T._accum(beta, g4.sum(axis=axes))
                if xt.requires_grad:
                    gx = g4 * gamma.data / std
                    T._accum(xt, gx if batched else gx[0])

        y = gamma.data * xhat + beta.data
        return T._make(y if batched else y[0], (xt, gamma, beta), backward, "batchnorm")

    def params(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def state(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]


class Dense:
    """Fully connected layer on (N, Din) -> (N, Dout)."""

    def __init__(self, din, dout, rng, init_std=None, name="fc"):
        self.name = name
        if init_std is None:
            w = he_init(rng, (din, dout), din)
        else:
            w = rng.normal(0.0, init_std, size=(din, dout))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True)

    def __call__(self, x):
        xt = T.as_tensor(x)
        single = xt.data.ndim == 1
        x2 = T.reshape(xt, (1, -1)) if single else xt
        out = T.add(T.matmul(x2, self.weight), self.bias)
        return T.reshape(out, (-1,)) if single else out

    def params(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def state(self):
        return []


class MlpHead:
    """Three fully connected layers with relu between them.

    Default widths 1024 -> 256 -> 64 -> 1, matching the flattened 32x32
    pooled attention map on the input side.
    """

    def __init__(self, rng, dims=(1024, 256, 64, 1), name="mlp"):
        if len(dims) != 4:
            raise ContractError(f"MlpHead: need 4 widths, got {dims}")
        self.name = name
        self.fc1 = Dense(dims[0], dims[1], rng, name=f"{name}.fc1")
        self.fc2 = Dense(dims[1], dims[2], rng, name=f"{name}.fc2")
        # small final init keeps the initial output logit near zero
        self.fc3 = Dense(dims[2], dims[3], rng, init_std=0.01, name=f"{name}.fc3")
        self.dims = tuple(dims)

    def __call__(self, x):
        return self.fc3(T.relu(self.fc2(T.relu(self.fc1(x)))))

    def params(self):
        return self.fc1.params() + self.fc2.params() + self.fc3.params()

    def state(self):
        return []


def lr_at_epoch(epoch, lr0=1e-3, factor=0.1, period=5):
    """Step-decay schedule: lr0 * factor ** floor(epoch / period)."""
    if epoch < 0:
        raise ContractError(f"lr_at_epoch: epoch must be >= 0, got {epoch}")
    return lr0 * factor ** (epoch // period)


class SgdMomentum:
    """SGD with Polyak momentum: v <- mu*v + g, w <- w - lr*v.

    Velocity buffers are zero-initialized in the order the parameters were
    registered, so updates are deterministic. ``step`` clears gradients.
    """

    def __init__(self, named_params, lr0=1e-3, momentum=0.9,
                 decay_factor=0.1, decay_period=5):
        self.named_params = list(named_params)
        self.lr0 = lr0
        self.momentum = momentum
        self.decay_factor = decay_factor
        self.decay_period = decay_period
        self.velocity = [np.zeros_like(p.data) for _, p in self.named_params]

    def lr_at_epoch(self, epoch):
        return lr_at_epoch(epoch, self.lr0, self.decay_factor, self.decay_period)

    def step(self, lr):
        for (name, p), v in zip(self.named_params, self.velocity):
            if p.grad is None:
                raise ContractError(f"sgd_step: parameter '{name}' has no gradient")
            v *= self.momentum
            v += p.grad
            p.data -= lr * v
            p.grad = None

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None
