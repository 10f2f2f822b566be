"""Finite-difference gradient checks for every layer and module.

Each check compares analytic gradients against central differences
(eps 1e-5) on small randomized inputs and returns the max relative error;
the suite passes when every entry is below 1e-4.
"""

import numpy as np

from . import tensor as T
from .attention import LocalAttention, SemanticAttention
from .layers import BatchNormLayer, ConvLayer, Dense, MlpHead
from .model import Backbone
from .tensor import gradient_check

TOLERANCE = 1e-4
EPS = 1e-5


def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def _swap(obj, attr, candidate, forward):
    """Substitute a parameter tensor object while building the loss.

    The candidate must be the very object in the graph, otherwise the
    gradient lands on the original parameter instead of the check target.
    """
    saved = getattr(obj, attr)
    setattr(obj, attr, candidate)
    try:
        return forward()
    finally:
        setattr(obj, attr, saved)


def run_suite(seed=0):
    """Run all checks; returns an ordered dict of name -> max relative error."""
    results = {}
    rng = _rng(seed)

    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(5, 3))
    results["matmul/a"] = gradient_check(
        lambda t: T.tsum(T.matmul(t, T.Tensor(w))), T.Tensor(x), EPS)
    results["matmul/b"] = gradient_check(
        lambda t: T.tsum(T.matmul(T.Tensor(x), t)), T.Tensor(w), EPS)

    a = rng.normal(size=(5, 4, 3))
    h = rng.normal(size=(5, 4, 1))
    results["hadamard/map"] = gradient_check(
        lambda t: T.tsum(T.mul(T.hadamard(t, T.Tensor(h)), T.Tensor(a))),
        T.Tensor(a), EPS)
    results["hadamard/gate"] = gradient_check(
        lambda t: T.tsum(T.hadamard(T.Tensor(a), t)), T.Tensor(h), EPS)

    results["sigmoid"] = gradient_check(
        lambda t: T.tsum(T.sigmoid(t)), T.Tensor(rng.normal(size=(3, 3))), EPS)
    results["softmax+cross_entropy"] = gradient_check(
        lambda t: T.cross_entropy(T.softmax(t), np.array([0, 1, 0])),
        T.Tensor(rng.normal(size=(3, 2))), EPS)
    results["log"] = gradient_check(
        lambda t: T.tsum(T.log(t)), T.Tensor(rng.uniform(0.2, 2.0, size=(4,))), EPS)
    results["div"] = gradient_check(
        lambda t: T.tsum(T.div(T.Tensor(a), t)),
        T.Tensor(rng.uniform(0.5, 2.0, size=(5, 4, 1))), EPS)

    conv = ConvLayer(2, 3, _rng(seed + 1))
    xc = rng.normal(size=(2, 6, 6, 2))
    results["conv2d/input"] = gradient_check(
        lambda t: T.tsum(T.conv2d(t, conv.kernel, conv.bias)), T.Tensor(xc), EPS)
    results["conv2d/kernel"] = gradient_check(
        lambda t: T.tsum(T.conv2d(T.Tensor(xc), t, conv.bias)),
        T.Tensor(conv.kernel.data), EPS)
    results["conv2d/bias"] = gradient_check(
        lambda t: T.tsum(T.conv2d(T.Tensor(xc), conv.kernel, t)),
        T.Tensor(conv.bias.data), EPS)

    wbn = rng.normal(size=(4, 5, 5, 3))
    xbn = rng.normal(size=(4, 5, 5, 3))

    def bn_input_loss(t):
        layer = BatchNormLayer(3)
        return T.tsum(T.mul(layer(t, training=True), T.Tensor(wbn)))

    results["batchnorm/input"] = gradient_check(bn_input_loss, T.Tensor(xbn), EPS)

    def bn_gamma_loss(t):
        layer = BatchNormLayer(3)
        layer.gamma = t
        return T.tsum(T.mul(layer(T.Tensor(xbn), training=True), T.Tensor(wbn)))

    results["batchnorm/gamma"] = gradient_check(
        bn_gamma_loss, T.Tensor(rng.normal(size=(3,))), EPS)

    wmp = rng.normal(size=(2, 3, 3, 2))
    results["maxpool2x2"] = gradient_check(
        lambda t: T.tsum(T.mul(T.maxpool2x2(t), T.Tensor(wmp))),
        T.Tensor(rng.normal(size=(2, 6, 6, 2))), EPS)

    wpool = rng.normal(size=(32, 32, 1))
    results["adaptive_avg_pool"] = gradient_check(
        lambda t: T.tsum(T.mul(T.adaptive_avg_pool(t, 32, 32), T.Tensor(wpool))),
        T.Tensor(rng.normal(size=(45, 39, 1))), EPS)

    dense = Dense(6, 4, _rng(seed + 2))
    xd = rng.normal(size=(3, 6))
    results["dense/weight"] = gradient_check(
        lambda t: _swap(dense, "weight", t, lambda: T.tsum(dense(T.Tensor(xd)))),
        T.Tensor(dense.weight.data), EPS)
    results["dense/input"] = gradient_check(
        lambda t: T.tsum(dense(t)), T.Tensor(xd), EPS)

    mlp = MlpHead(_rng(seed + 3), dims=(16, 8, 4, 1))
    xm = rng.normal(size=(2, 16))
    results["mlp/input"] = gradient_check(
        lambda t: T.tsum(mlp(t)), T.Tensor(xm), EPS)
    results["mlp/fc3_weight"] = gradient_check(
        lambda t: _swap(mlp.fc3, "weight", t, lambda: T.tsum(mlp(T.Tensor(xm)))),
        T.Tensor(mlp.fc3.weight.data), EPS)

    lam = LocalAttention(_rng(seed + 4))
    xl = rng.normal(size=(2, 8, 8, 3))
    results["local_attention/input"] = gradient_check(
        lambda t: T.tsum(lam(t, training=True)[0]), T.Tensor(xl), EPS)
    for pname, layer in (("conv1", lam.conv1), ("conv2", lam.conv2),
                         ("conv3", lam.conv3)):
        results[f"local_attention/{pname}_kernel"] = gradient_check(
            lambda t, ly=layer: _swap(
                ly, "kernel", t,
                lambda: T.tsum(lam(T.Tensor(xl), training=True)[0])),
            T.Tensor(layer.kernel.data), EPS)

    sam = SemanticAttention(_rng(seed + 5))
    xs = rng.normal(size=(2, 32, 32, 3))
    results["semantic_attention/input"] = gradient_check(
        lambda t: T.tsum(sam(t, training=True)), T.Tensor(xs), EPS)
    # fc3 keeps the coordinate count small; fc1 would need 2*262144 passes
    results["semantic_attention/mlp_fc3"] = gradient_check(
        lambda t: _swap(sam.mlp.fc3, "weight", t,
                        lambda: T.tsum(sam(T.Tensor(xs), training=True))),
        T.Tensor(sam.mlp.fc3.weight.data), EPS)
    results["semantic_attention/conv3_kernel"] = gradient_check(
        lambda t: _swap(sam.conv3, "kernel", t,
                        lambda: T.tsum(sam(T.Tensor(xs), training=True))),
        T.Tensor(sam.conv3.kernel.data), EPS)

    backbone = Backbone(_rng(seed + 6), input_size=8, stages=(4, 6), hidden=8)
    xb = rng.normal(size=(2, 8, 8, 3))
    yb = np.array([0, 1])
    results["backbone/input"] = gradient_check(
        lambda t: T.cross_entropy(T.softmax(backbone(t, training=True)), yb),
        T.Tensor(xb), EPS)
    results["backbone/conv0_kernel"] = gradient_check(
        lambda t: _swap(
            backbone.stages[0][0], "kernel", t,
            lambda: T.cross_entropy(T.softmax(backbone(T.Tensor(xb), training=True)), yb)),
        T.Tensor(backbone.stages[0][0].kernel.data), EPS)

    # gated fragment classifier end to end: attention, backbone, loss
    lam2 = LocalAttention(_rng(seed + 7))
    bb2 = Backbone(_rng(seed + 8), input_size=8, stages=(4, 6), hidden=8)

    def pipeline_loss(t):
        gated, _ = lam2(t, training=True)
        return T.cross_entropy(T.softmax(bb2(gated, training=True)), yb)

    results["fragment_pipeline/input"] = gradient_check(
        pipeline_loss, T.Tensor(rng.normal(size=(2, 8, 8, 3))), EPS)

    return results


def suite_passes(results, tolerance=TOLERANCE):
    return all(err < tolerance for err in results.values())
