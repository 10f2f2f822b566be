"""The two cascaded attention modules.

LocalAttention gates a fragment with a learned spatial heatmap; it runs in
front of each per-fragment classifier. SemanticAttention maps a gated
fragment to a scalar weight in (0, 1) used to fuse the six per-fragment
predictions. Each fragment owns an independent copy of both (no weight
sharing across fragments or between the two streams).
"""

import numpy as np

from . import tensor as T
from .errors import ContractError
from .layers import BatchNormLayer, ConvLayer, MlpHead


class LocalAttention:
    """Two-stream module: feature conv and a residual attention stream.

    feature stream:   x -> conv1 -> x_f
    attention stream: x_a = x + conv2(relu(bn(x))); h = sigmoid(conv3(x_a))
    output:           x_att = x_f * h (heatmap broadcast over channels)

    conv1 and conv2 share the same hyperparameters (3x3, 3 channels) but
    are learned independently.
    """

    def __init__(self, rng, channels=3, name="lam"):
        self.name = name
        self.conv1 = ConvLayer(channels, channels, rng, name=f"{name}.conv1")
        self.bn = BatchNormLayer(channels, name=f"{name}.bn")
        self.conv2 = ConvLayer(channels, channels, rng, name=f"{name}.conv2")
        self.conv3 = ConvLayer(channels, 1, rng, name=f"{name}.conv3")
        # near-identity feature stream at init: the downstream classifier
        # starts from barely-mixed fragments instead of a random channel
        # scramble, which costs several epochs at desk scale
        self.conv1.kernel.data *= 0.1
        for c in range(channels):
            self.conv1.kernel.data[1, 1, c, c] += 1.0
        # neutral gate at init: heatmap starts at exactly 0.5 everywhere, so
        # a random gate cannot cancel the feature stream's class signal
        # (gradients to conv3 stay nonzero through the gating product)
        self.conv3.kernel.data[:] = 0.0

    def __call__(self, x, training=False):
        """Return (x_att, heatmap); shapes match the input spatially."""
        x = T.as_tensor(x)
        if x.data.shape[-1] != self.conv1.kernel.data.shape[2]:
            raise ContractError(
                f"local attention expects {self.conv1.kernel.data.shape[2]} channels, "
                f"got input shape {x.shape}")
        x_f = self.conv1(x)
        residual = self.conv2(T.relu(self.bn(x, training)))
        x_a = T.add(x, residual)
        heat = T.sigmoid(self.conv3(x_a))
        x_att = T.hadamard(x_f, heat)
        return x_att, heat

    def params(self):
        return (self.conv1.params() + self.bn.params()
                + self.conv2.params() + self.conv3.params())

    def state(self):
        return self.bn.state()


class SemanticAttention:
    """Fragment-weight head: attention stream -> 32x32 pool -> MLP -> sigmoid.

    The attention stream clones the LocalAttention one (own weights). The
    pooled map flattens to 1024 values; the final sigmoid keeps the weight
    in (0, 1) so the fused score stays positive.
    """

    POOL = 32

    def __init__(self, rng, channels=3, mlp_dims=(1024, 256, 64, 1), name="sam"):
        if mlp_dims[0] != self.POOL * self.POOL:
            raise ContractError(
                f"mlp input width must be {self.POOL * self.POOL}, got {mlp_dims[0]}")
        self.name = name
        self.bn = BatchNormLayer(channels, name=f"{name}.bn")
        self.conv2 = ConvLayer(channels, channels, rng, name=f"{name}.conv2")
        self.conv3 = ConvLayer(channels, 1, rng, name=f"{name}.conv3")
        self.mlp = MlpHead(rng, dims=mlp_dims, name=f"{name}.mlp")

    def __call__(self, x_att, training=False):
        """Return the fragment weight: scalar-shaped (N, 1) batch or (1,)."""
        x_att = T.as_tensor(x_att)
        batched = x_att.data.ndim == 4
        h, w = (x_att.data.shape[1:3] if batched else x_att.data.shape[0:2])
        if h < self.POOL or w < self.POOL:
            raise ContractError(
                f"semantic attention needs fragments >= {self.POOL}x{self.POOL}, got {h}x{w}")
        residual = self.conv2(T.relu(self.bn(x_att, training)))
        w_att = self.conv3(T.add(x_att, residual))
        pooled = T.adaptive_avg_pool(w_att, self.POOL, self.POOL)
        flat_shape = (-1, self.POOL * self.POOL) if batched else (self.POOL * self.POOL,)
        vec = T.reshape(pooled, flat_shape)
        return T.sigmoid(self.mlp(vec))

    def pooled_vector(self, x_att):
        """The flattened 1024-long pooled attention map (diagnostic path)."""
        x_att = T.as_tensor(x_att)
        with T.no_grad():
            residual = self.conv2(T.relu(self.bn(x_att, training=False)))
            w_att = self.conv3(T.add(x_att, residual))
            pooled = T.adaptive_avg_pool(w_att, self.POOL, self.POOL)
        return pooled.data.reshape(-1 if x_att.data.ndim == 3 else (x_att.data.shape[0], -1))

    def params(self):
        return (self.bn.params() + self.conv2.params()
                + self.conv3.params() + self.mlp.params())

    def state(self):
        return self.bn.state()


def heatmap_to_gray(heat):
    """Scale a (H, W, 1) heatmap in (0, 1) to a uint8 grayscale image."""
    arr = np.asarray(heat)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
