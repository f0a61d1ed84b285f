import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from bevterrain.metrics import confusion, ece, format_report, metrics
from bevterrain.pseudo_label import VOID


class TestConfusion:
    def test_perfect_is_diagonal(self):
        t = np.array([0, 1, 2, 2, 1])
        assert np.array_equal(confusion(t, t, 3), np.diag([1, 2, 2]))

    def test_all_void(self):
        cm = confusion(np.zeros(4, dtype=int), np.full(4, VOID), 3)
        assert cm.shape == (3, 3) and not cm.any()

    def test_rows_are_truth(self):
        cm = confusion(np.array([1]), np.array([0]), 2)
        assert cm.tolist() == [[0, 1], [0, 0]]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            confusion(np.zeros(3, dtype=int), np.zeros(4, dtype=int), 2)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            confusion(np.array([3]), np.array([0]), 3)

    @given(st.integers(0, 10**6), st.integers(1, 6))
    def test_matches_counting(self, seed, K):
        rng = np.random.Generator(np.random.PCG64(seed))
        pred = rng.integers(0, K, size=100)
        truth = rng.integers(0, K, size=100)
        truth[rng.random(100) < 0.2] = VOID
        cm = confusion(pred, truth, K)
        assert np.array_equal(cm, oracles.confusion(pred, truth, K))
        assert cm.sum() == (truth != VOID).sum()


class TestMetrics:
    def test_perfect(self):
        m = metrics(np.diag([3, 4, 5]))
        assert m.miou == 1.0 and m.accuracy == 1.0

    def test_two_class_example(self):
        # class 1 never occurs in the truth, so it is left out of the mean
        m = metrics(np.array([[1, 1], [0, 0]]))
        assert m.iou == {0: 0.5}
        assert m.miou == 0.5
        assert m.accuracy == 0.5

    def test_supported_class_with_zero_iou_counts(self):
        m = metrics(np.array([[1, 0, 0], [1, 0, 0], [0, 0, 0]]))
        assert m.iou == {0: 0.5, 1: 0.0}
        assert m.miou == 0.25

    def test_only_unsupported_class_dropped(self):
        m = metrics(np.array([[2, 0, 0], [0, 1, 0], [0, 0, 0]]))
        assert m.iou == {0: 1.0, 1: 1.0}
        assert m.miou == 1.0

    def test_empty(self):
        m = metrics(np.zeros((3, 3), dtype=int))
        assert m.iou == {} and m.miou is None and m.accuracy is None
        assert m.records() == [("cells", 0.0)]

    @given(st.integers(0, 10**6), st.integers(1, 6))
    def test_matches_formulas(self, seed, K):
        rng = np.random.Generator(np.random.PCG64(seed))
        cm = rng.integers(0, 20, size=(K, K)) * (rng.random((K, K)) < 0.7)
        m = metrics(cm)
        iou, miou, acc = oracles.scores(cm.tolist())
        assert m.iou.keys() == iou.keys()
        for k in iou:
            assert m.iou[k] == pytest.approx(iou[k], abs=1e-12)
        if miou is None:
            assert m.miou is None
        else:
            assert m.miou == pytest.approx(miou, abs=1e-12)
            assert m.accuracy == pytest.approx(acc, abs=1e-12)
            assert 0 <= m.miou <= 1 and 0 <= m.accuracy <= 1

    @given(st.integers(0, 10**6))
    def test_class_permutation_invariance(self, seed):
        rng = np.random.Generator(np.random.PCG64(seed))
        K = 5
        pred, truth = rng.integers(0, K, 200), rng.integers(0, K, 200)
        perm = rng.permutation(K)
        a = metrics(confusion(pred, truth, K))
        b = metrics(confusion(perm[pred], perm[truth], K))
        assert a.miou == pytest.approx(b.miou, abs=1e-12)
        assert a.accuracy == b.accuracy
        for k, v in a.iou.items():
            assert b.iou[perm[k]] == pytest.approx(v, abs=1e-12)

    def test_report_lines(self):
        text = format_report(metrics(np.array([[3, 1], [0, 4]])), {"ece": 0.125})
        lines = dict(line.split("=") for line in text.strip().splitlines())
        assert float(lines["accuracy"]) == 7 / 8
        assert float(lines["ece"]) == 0.125
        assert set(lines) == {"miou", "accuracy", "iou_class_0", "iou_class_1", "cells", "ece"}


class TestEce:
    def test_calibrated_sample(self):
        # within each bin, the confidence equals the empirical accuracy
        conf = np.array([0.25] * 4 + [0.75] * 4)
        correct = np.array([1, 0, 0, 0, 1, 1, 1, 0])
        assert ece(conf, correct) == pytest.approx(0.0, abs=1 / len(conf))

    def test_confident_and_wrong(self):
        assert ece(np.ones(10), np.zeros(10)) == 1.0

    def test_last_bin_includes_one(self):
        assert ece(np.array([1.0, 0.95]), np.array([1, 1])) == pytest.approx(0.025)

    def test_bin_edges_right_exclusive(self):
        # 0.5 belongs to bin [0.5, 0.6), not [0.4, 0.5)
        a = ece(np.array([0.5, 0.45]), np.array([1, 0]))
        assert a == pytest.approx(0.5 * 0.5 + 0.5 * 0.45)

    def test_empty(self):
        assert ece(np.array([]), np.array([])) == 0.0

    @given(st.integers(0, 10**6), st.integers(1, 300))
    def test_matches_binning_oracle(self, seed, n):
        rng = np.random.Generator(np.random.PCG64(seed))
        conf = rng.random(n)
        # some confidences sit exactly on bin edges
        conf = np.where(rng.random(n) < 0.1, rng.integers(0, 11, size=n) / 10, conf)
        correct = rng.random(n) < conf
        e = ece(conf, correct)
        assert e == pytest.approx(oracles.ece(conf.tolist(), correct.tolist()), abs=1e-12)
        assert 0.0 <= e <= 1.0
