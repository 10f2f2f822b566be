import numpy as np
import pytest

import semaforge.tensor as T
from semaforge.config import ModelConfig
from semaforge.errors import ContractError
from semaforge.model import (Backbone, DetectorModel, decide, fragment_predict,
                             fuse_scores, loss_lam, loss_sam)
from semaforge.segmentation import FRAGMENTS
from semaforge.synthetic import FaceParams, generate_face
from semaforge.tensor import Tensor

SMALL = ModelConfig(fragment_size=32, backbone_stages=(4, 8), backbone_hidden=16)


def _frags(rng, n=None, size=32):
    shape = (size, size, 3) if n is None else (n, size, size, 3)
    return {k: rng.normal(size=shape) for k in FRAGMENTS}


def _brute_scores(P, W):
    out = np.zeros(2)
    for y in range(2):
        acc = 0.0
        for i in range(6):
            acc += W[i] * P[y, i]
        out[y] = acc
    return out


class TestFusion:
    def test_uniform_weights_unanimous_fake(self):
        P = np.zeros((2, 6))
        P[0] = 1.0
        W = np.full(6, 1.0 / 6.0)
        scores = fuse_scores(P, W)
        assert np.allclose(scores, [1.0, 0.0])
        assert decide(scores) == 0

    def test_worked_example(self):
        p0 = np.array([0.8, 0.2, 0.6, 0.9, 0.7, 0.5])
        P = np.stack([p0, 1 - p0])
        W = np.array([0.5, 0.1, 0.2, 0.9, 0.4, 0.3])
        scores = fuse_scores(P, W)
        assert scores == pytest.approx([1.78, 0.62], abs=1e-12)
        assert decide(scores) == 0

    def test_exact_match_with_brute_force(self, rng):
        for _ in range(200):
            P = rng.uniform(size=(2, 6))
            W = rng.uniform(0.01, 1.0, size=6)
            assert np.array_equal(fuse_scores(P, W), _brute_scores(P, W))

    def test_argmax_scale_invariance(self, rng):
        for _ in range(100):
            p0 = rng.uniform(size=6)
            P = np.stack([p0, 1 - p0])
            W = rng.uniform(0.01, 1.0, size=6)
            c = float(rng.uniform(0.01, 100.0))
            assert decide(fuse_scores(P, c * W)) == decide(fuse_scores(P, W))

    def test_batched_matches_per_sample(self, rng):
        P = rng.uniform(size=(5, 2, 6))
        W = rng.uniform(0.01, 1.0, size=(5, 6))
        batched = fuse_scores(P, W)
        for i in range(5):
            assert np.array_equal(batched[i], fuse_scores(P[i], W[i]))

    def test_bad_shapes(self):
        with pytest.raises(ContractError):
            fuse_scores(np.ones((2, 5)), np.ones(5))


class TestFragmentPredict:
    def test_cases(self):
        assert fragment_predict([0.9, 0.1]) == 0
        assert fragment_predict([0.1, 0.9]) == 1
        assert fragment_predict([0.5, 0.5]) == 0   # documented tie rule: fake

    def test_bad_shape(self):
        with pytest.raises(ContractError):
            fragment_predict([0.2, 0.3, 0.5])


class TestLosses:
    def test_loss_lam_values(self):
        assert float(loss_lam(Tensor([0.5, 0.5]), 0).data) == pytest.approx(np.log(2))
        assert float(loss_lam(Tensor([0.0, 1.0]), 1).data) == pytest.approx(0.0, abs=1e-11)
        assert float(loss_lam(Tensor([0.25, 0.75]), 1).data) == pytest.approx(-np.log(0.75))

    def test_loss_sam_unanimous_correct_is_zero(self):
        P = np.zeros((2, 6))
        P[1] = 1.0
        W = Tensor(np.full(6, 0.37))
        assert float(loss_sam(P, W, 1).data) == pytest.approx(0.0, abs=1e-11)

    def test_loss_sam_symmetric_half_is_ln2_for_any_weights(self, rng):
        P = np.full((2, 6), 0.5)
        for _ in range(5):
            W = Tensor(rng.uniform(0.05, 0.95, size=6))
            assert float(loss_sam(P, W, 0).data) == pytest.approx(np.log(2), abs=1e-12)

    def test_loss_sam_worked_example(self):
        p0 = np.array([0.8, 0.2, 0.6, 0.9, 0.7, 0.5])
        P = np.stack([p0, 1 - p0])
        W = Tensor(np.array([0.5, 0.1, 0.2, 0.9, 0.4, 0.3]))
        got = float(loss_sam(P, W, 0).data)
        assert got == pytest.approx(-np.log(1.78 / 2.4), abs=1e-12)

    def test_loss_sam_unnormalized_toggle(self):
        p0 = np.array([0.8, 0.2, 0.6, 0.9, 0.7, 0.5])
        P = np.stack([p0, 1 - p0])
        W = Tensor(np.array([0.5, 0.1, 0.2, 0.9, 0.4, 0.3]))
        got = float(loss_sam(P, W, 0, normalize=False).data)
        assert got == pytest.approx(-np.log(1.78), abs=1e-12)

    def test_loss_sam_zero_weights_guarded(self):
        P = np.full((2, 6), 0.5)
        with pytest.raises(ContractError):
            loss_sam(P, Tensor(np.zeros(6)), 0)

    def test_loss_sam_uniform_equals_mean_vector_ce(self, rng):
        p0 = rng.uniform(0.05, 0.95, size=6)
        P = np.stack([p0, 1 - p0])
        W = Tensor(np.full(6, 0.25))
        got = float(loss_sam(P, W, 1).data)
        mean_vec = P.mean(axis=1)
        assert got == pytest.approx(-np.log(mean_vec[1]), abs=1e-12)

    def test_loss_sam_bad_labels(self):
        P = np.full((2, 6), 0.5)
        with pytest.raises(ContractError):
            loss_sam(P, Tensor(np.full(6, 0.5)), 2)

    def test_loss_sam_gradient_flows_to_weights(self, rng):
        p0 = rng.uniform(0.1, 0.9, size=6)
        P = np.stack([p0, 1 - p0])
        W = Tensor(rng.uniform(0.2, 0.8, size=6), requires_grad=True)
        T.backward(loss_sam(P, W, 0))
        assert W.grad is not None and np.all(np.isfinite(W.grad))


class TestAgreementProperty:
    def test_unanimous_majority_wins_for_any_positive_weights(self, rng):
        for _ in range(50):
            y = int(rng.integers(0, 2))
            p_y = rng.uniform(0.51, 1.0, size=6)
            P = np.zeros((2, 6))
            P[y] = p_y
            P[1 - y] = 1 - p_y
            W = rng.uniform(0.01, 5.0, size=6)
            assert decide(fuse_scores(P, W)) == y


class TestBranches:
    def test_zeroed_heads_give_half_matrix(self, rng):
        model = DetectorModel(SMALL, seed=0)
        for key in FRAGMENTS:
            model.backbones[key].fc2.weight.data[:] = 0.0
            model.backbones[key].fc2.bias.data[:] = 0.0
        P, x_atts, heats = model.fbranch_forward(_frags(rng), training=False)
        assert P.shape == (2, 6)
        assert np.allclose(P, 0.5)

    def test_columns_sum_to_one(self, rng):
        model = DetectorModel(SMALL, seed=1)
        P, _, _ = model.fbranch_forward(_frags(rng), training=False)
        assert np.allclose(P.sum(axis=0), 1.0, atol=1e-9)

    def test_forward_reproducible(self, rng):
        model = DetectorModel(SMALL, seed=2)
        frags = _frags(rng)
        P1, _, _ = model.fbranch_forward(frags, training=False)
        P2, _, _ = model.fbranch_forward(frags, training=False)
        assert np.array_equal(P1, P2)

    def test_missing_fragment_named(self, rng):
        model = DetectorModel(SMALL, seed=3)
        frags = _frags(rng)
        del frags["m"]
        with pytest.raises(ContractError) as err:
            model.fbranch_forward(frags, training=False)
        assert "m" in str(err.value)

    def test_gbranch_weights_in_unit_interval(self, rng):
        model = DetectorModel(SMALL, seed=4)
        P, x_atts, _ = model.fbranch_forward(_frags(rng), training=False)
        W, scores, label = model.gbranch_forward(P, x_atts, training=False)
        assert W.shape == (6,)
        assert np.all((W > 0) & (W < 1))
        assert label in (0, 1)

    def test_gbranch_without_sam_uses_uniform_vote(self, rng):
        cfg = ModelConfig(fragment_size=32, backbone_stages=(4, 8),
                          backbone_hidden=16, use_sam=False)
        model = DetectorModel(cfg, seed=5)
        P, x_atts, _ = model.fbranch_forward(_frags(rng), training=False)
        W, scores, _ = model.gbranch_forward(P, x_atts, training=False)
        assert np.allclose(W, 1.0 / 6.0)
        assert np.allclose(scores, fuse_scores(P, W))

    def test_batched_forward(self, rng):
        model = DetectorModel(SMALL, seed=6)
        P, x_atts, _ = model.fbranch_forward(_frags(rng, n=4), training=False)
        assert P.shape == (4, 2, 6)
        W, scores, labels = model.gbranch_forward(P, x_atts, training=False)
        assert W.shape == (4, 6) and scores.shape == (4, 2) and labels.shape == (4,)


class TestPredict:
    @pytest.fixture(scope="class")
    def face(self):
        rng = np.random.Generator(np.random.PCG64(11))
        return generate_face(FaceParams.sample(rng))

    def test_untrained_zeroed_model_ties_to_fake(self, face):
        img, lm = face
        model = DetectorModel(SMALL, seed=0)
        for key in FRAGMENTS:
            model.backbones[key].fc2.weight.data[:] = 0.0
            model.backbones[key].fc2.bias.data[:] = 0.0
        pred = model.predict(img, lm)
        assert np.allclose(pred.possibility, 0.5)
        assert pred.scores[0] == pytest.approx(pred.scores[1])
        assert pred.label == 0

    def test_label_matches_scores(self, face):
        img, lm = face
        model = DetectorModel(SMALL, seed=7)
        pred = model.predict(img, lm)
        assert pred.label == int(np.argmax(pred.scores))
        assert set(pred.fragment_labels) == set(FRAGMENTS)
        assert set(pred.heatmaps) == set(FRAGMENTS)

    def test_no_lam_predicts_without_heatmaps(self, face):
        img, lm = face
        cfg = ModelConfig(fragment_size=32, backbone_stages=(4, 8),
                          backbone_hidden=16, use_lam=False)
        model = DetectorModel(cfg, seed=8)
        pred = model.predict(img, lm)
        assert pred.heatmaps == {}


class TestBackbone:
    def test_logit_shape(self, rng):
        bb = Backbone(rng, input_size=32, stages=(4, 8), hidden=16)
        out = bb(Tensor(rng.normal(size=(3, 32, 32, 3))), training=True)
        assert out.data.shape == (3, 2)
        single = bb(Tensor(rng.normal(size=(32, 32, 3))), training=False)
        assert single.data.shape == (2,)

    def test_indivisible_size_rejected(self, rng):
        with pytest.raises(ContractError):
            Backbone(rng, input_size=30, stages=(4, 8, 16), hidden=16)
