import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semaforge.errors import ContractError
from semaforge.metrics import (EvalReport, accuracy, auc_pairwise, confusion,
                               roc_auc, roc_curve)


class TestAccuracyConfusion:
    def test_accuracy(self):
        assert accuracy([0, 1, 0, 1], [0, 1, 1, 1]) == 0.75

    def test_confusion_counts(self):
        c = confusion([0, 0, 1, 1], [0, 1, 0, 1], positive=0)
        assert c == {"tp": 1, "fp": 1, "tn": 1, "fn": 1}

    def test_accuracy_empty_rejected(self):
        with pytest.raises(ContractError):
            accuracy([], [])


class TestRocAuc:
    def test_perfect_separation(self):
        (_, _, _), auc = roc_auc([0.9, 0.8, 0.2, 0.1], [True, True, False, False])
        assert auc == 1.0

    def test_all_identical_scores(self):
        (_, _, _), auc = roc_auc([0.5] * 6, [True, False, True, False, True, False])
        assert auc == 0.5

    def test_three_quarters_case(self):
        # pairwise oracle: pos {0.35, 0.8} vs neg {0.1, 0.4}
        scores = [0.1, 0.35, 0.4, 0.8]
        pos = [False, True, False, True]
        expect = auc_pairwise(scores, pos)
        assert expect == 0.75
        (_, _, _), auc = roc_auc(scores, pos)
        assert auc == pytest.approx(expect, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(ContractError):
            roc_auc([0.4, 0.6], [True, True])

    def test_curve_monotone_and_anchored(self, rng):
        scores = rng.uniform(size=50)
        pos = rng.uniform(size=50) > 0.5
        pos[0], pos[1] = True, False
        fpr, tpr, thr = roc_curve(scores, pos)
        assert fpr[0] == 0.0 and tpr[0] == 0.0
        assert fpr[-1] == 1.0 and tpr[-1] == 1.0
        assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
        assert thr[0] == np.inf

    def test_trapezoid_equals_pairwise_with_heavy_ties(self, rng):
        for trial in range(20):
            n = int(rng.integers(4, 60))
            # coarse grid forces many tied scores
            scores = rng.integers(0, 4, size=n) / 3.0
            pos = rng.uniform(size=n) > 0.5
            if pos.all() or (~pos).all():
                continue
            (_, _, _), auc = roc_auc(scores, pos)
            assert abs(auc - auc_pairwise(scores, pos)) < 1e-12

    @given(st.integers(2, 40), st.integers(0, 10 ** 6))
    @settings(max_examples=40, deadline=None)
    def test_trapezoid_equals_pairwise_random(self, n, seed):
        rng = np.random.Generator(np.random.PCG64(seed))
        scores = np.round(rng.uniform(size=n), 2)
        pos = rng.uniform(size=n) > 0.4
        if pos.all() or (~pos).all():
            return
        (_, _, _), auc = roc_auc(scores, pos)
        assert abs(auc - auc_pairwise(scores, pos)) < 1e-12


class TestEvalReport:
    def _report(self):
        return EvalReport(dataset_id="ds", split="test", n_fake=5, n_real=5,
                          accuracy=0.9, confusion={"tp": 5, "fp": 1, "tn": 4, "fn": 0},
                          auc=0.95, roc_points=[(0.0, 0.0, np.inf), (1.0, 1.0, 0.0)],
                          fragment_accuracy={"p": 0.8}, seed=3, config_hash="abc")

    def test_json_roundtrip(self, tmp_path):
        rep = self._report()
        rep.save(tmp_path)
        back = EvalReport.from_json_file(tmp_path / "report.json")
        assert back.accuracy == rep.accuracy
        assert back.confusion == rep.confusion

    def test_save_writes_three_files(self, tmp_path):
        self._report().save(tmp_path)
        for name in ("report.json", "report.csv", "roc_points.csv"):
            assert (tmp_path / name).exists()

    def test_json_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        self._report().save(a)
        self._report().save(b)
        assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
