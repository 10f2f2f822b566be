import numpy as np
import pytest

from semaforge.config import ModelConfig, TrainConfig
from semaforge.errors import ContractError
from semaforge.model import DetectorModel
from semaforge.segmentation import FRAGMENTS
from semaforge.train import (cache_from_arrays, train_fbranch, train_gbranch,
                             train_two_step)

SMALL = ModelConfig(fragment_size=32, backbone_stages=(8, 16), backbone_hidden=32)
FAST = TrainConfig(epochs_fbranch=5, epochs_gbranch=3, batch_size=16, seed=0)


def _separable_cache(rng, n):
    """Bright fragments are fake, dark fragments are real."""
    labels = np.arange(n) % 2
    base = np.where(labels[:, None, None, None] == 0, 0.85, 0.15)
    frags = {k: base + 0.03 * rng.normal(size=(n, 32, 32, 3)) for k in FRAGMENTS}
    return cache_from_arrays(frags, labels)


def _planted_mouth_cache(rng, n):
    """Only the mouth fragment carries the label; everything else is noise."""
    labels = np.arange(n) % 2
    frags = {}
    for k in FRAGMENTS:
        if k == "m":
            base = np.where(labels[:, None, None, None] == 0, 0.75, 0.25)
            frags[k] = base + 0.05 * rng.normal(size=(n, 32, 32, 3))
        else:
            frags[k] = 0.5 + 0.05 * rng.normal(size=(n, 32, 32, 3))
    return cache_from_arrays(frags, labels)


@pytest.fixture(scope="module")
def separable_model():
    rng = np.random.Generator(np.random.PCG64(0))
    train = _separable_cache(rng, 96)
    val = _separable_cache(rng, 32)
    model = DetectorModel(SMALL, seed=0)
    metrics = train_fbranch(model, train, val, FAST)
    return model, metrics, train, val


class TestFbranch:
    def test_separable_set_reaches_high_accuracy(self, separable_model):
        _, metrics, _, _ = separable_model
        for key, m in metrics["fragments"].items():
            assert m["best_val_acc"] >= 0.99, (key, m["best_val_acc"])

    def test_zero_epochs_flags_untrained(self):
        rng = np.random.Generator(np.random.PCG64(1))
        cache = _separable_cache(rng, 8)
        model = DetectorModel(SMALL, seed=0)
        cfg = TrainConfig(epochs_fbranch=0, epochs_gbranch=0, seed=0)
        metrics = train_fbranch(model, cache, cache, cfg)
        assert metrics["trained"] is False

    def test_single_class_split_refused(self):
        rng = np.random.Generator(np.random.PCG64(2))
        frags = {k: rng.normal(size=(8, 32, 32, 3)) for k in FRAGMENTS}
        cache = cache_from_arrays(frags, np.zeros(8, dtype=int))
        model = DetectorModel(SMALL, seed=0)
        with pytest.raises(ContractError) as err:
            train_fbranch(model, cache, cache, FAST)
        assert "single-class" in str(err.value)

    def test_determinism_same_seed_bit_identical(self, tmp_path):
        rng = np.random.Generator(np.random.PCG64(3))
        train = _separable_cache(rng, 32)
        val = _separable_cache(rng, 16)
        cfg = TrainConfig(epochs_fbranch=2, epochs_gbranch=0, batch_size=8,
                          seed=7, jobs=1)
        dirs = []
        for name in ("a", "b"):
            model = DetectorModel(SMALL, seed=7)
            train_fbranch(model, train, val, cfg)
            model.save(tmp_path / name)
            dirs.append(tmp_path / name)
        for key in FRAGMENTS:
            fa = (dirs[0] / f"fbranch_{key}.bin").read_bytes()
            fb = (dirs[1] / f"fbranch_{key}.bin").read_bytes()
            assert fa == fb


class TestGbranch:
    def test_requires_trained_fbranch(self):
        rng = np.random.Generator(np.random.PCG64(4))
        cache = _separable_cache(rng, 8)
        model = DetectorModel(SMALL, seed=0)
        with pytest.raises(ContractError):
            train_gbranch(model, cache, cache, FAST)

    def test_requires_sam_heads(self):
        rng = np.random.Generator(np.random.PCG64(5))
        cache = _separable_cache(rng, 8)
        cfg_m = ModelConfig(fragment_size=32, backbone_stages=(4, 8),
                            backbone_hidden=16, use_sam=False)
        model = DetectorModel(cfg_m, seed=0)
        model.meta["fbranch_trained"] = True
        with pytest.raises(ContractError):
            train_gbranch(model, cache, cache, FAST)

    def test_fbranch_bytes_frozen_during_step_two(self, separable_model, tmp_path):
        model, _, train, val = separable_model
        model.save(tmp_path / "before")
        train_gbranch(model, train, val, FAST)
        model.save(tmp_path / "after")
        for key in FRAGMENTS:
            before = (tmp_path / "before" / f"fbranch_{key}.bin").read_bytes()
            after = (tmp_path / "after" / f"fbranch_{key}.bin").read_bytes()
            assert before == after

    def test_planted_mouth_signal_lifts_its_weight(self):
        rng = np.random.Generator(np.random.PCG64(6))
        train = _planted_mouth_cache(rng, 96)
        val = _planted_mouth_cache(rng, 32)
        model = DetectorModel(SMALL, seed=1)
        cfg = TrainConfig(epochs_fbranch=5, epochs_gbranch=5, batch_size=16, seed=1)
        train_fbranch(model, train, val, cfg)
        train_gbranch(model, train, val, cfg)
        from semaforge.train import _frozen_fbranch_pass
        import semaforge.tensor as T

        P, x_atts = _frozen_fbranch_pass(model, val)
        ws = []
        with T.no_grad():
            for key in FRAGMENTS:
                w = model.sams[key](x_atts[key].astype(np.float64), training=False)
                ws.append(float(w.data.mean()))
        w_by_key = dict(zip(FRAGMENTS, ws))
        others = [w_by_key[k] for k in FRAGMENTS if k != "m"]
        assert w_by_key["m"] > np.mean(others)


class TestTwoStep:
    def test_step_selection(self):
        rng = np.random.Generator(np.random.PCG64(8))
        train = _separable_cache(rng, 16)
        val = _separable_cache(rng, 8)
        cfg = TrainConfig(epochs_fbranch=1, epochs_gbranch=1, batch_size=8, seed=0)
        model = DetectorModel(SMALL, seed=0)
        metrics = train_two_step(model, train, val, cfg, step="1")
        assert "fbranch" in metrics and "gbranch" not in metrics
        metrics = train_two_step(model, train, val, cfg, step="2")
        assert "gbranch" in metrics and "fbranch" not in metrics
