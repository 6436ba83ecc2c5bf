"""Metric tests against hand values and an independent pair-counting oracle."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import oracle_mcc_covariance, oracle_metrics

from convlora import metrics as M


class TestConfusion:
    def test_perfect_is_diagonal(self):
        cm = M.confusion([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert np.array_equal(cm, np.diag([1, 2, 1]))

    def test_empty(self):
        assert not M.confusion([], [], 3).any()

    def test_hand_count(self):
        cm = M.confusion([0, 1, 1], [0, 0, 1], 2)
        assert np.array_equal(cm, [[1, 1], [0, 1]])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            M.confusion([0, 3], [0, 1], 2)


class TestAccuracy:
    def test_diagonal(self):
        assert M.accuracy(np.diag([3, 4])) == 1.0

    def test_hand_value(self):
        assert M.accuracy(np.array([[1, 1], [0, 1]])) == 2 / 3

    def test_all_off_diagonal(self):
        assert M.accuracy(np.array([[0, 2], [3, 0]])) == 0.0

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            M.accuracy(np.zeros((2, 2), dtype=int))


class TestPrf1:
    def test_perfect_all_modes(self):
        cm = np.diag([5, 3, 2])
        for mode in M.AVERAGING_MODES:
            assert M.prf1(cm, mode) == (1.0, 1.0, 1.0)

    def test_hand_macro(self):
        cm = np.array([[1, 1], [0, 1]])
        p, r, f1 = M.prf1(cm, "macro")
        assert p == pytest.approx(0.75)
        assert r == pytest.approx(0.75)
        assert f1 == pytest.approx(2 / 3)

    def test_never_predicted_class_gets_zero_precision(self):
        cm = np.array([[4, 0], [2, 0]])   # class 1 never predicted, support 2
        rows = M.per_class_prf1(cm)
        assert rows[1]["precision"] == 0.0
        assert rows[1]["recall"] == 0.0

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            M.prf1(np.eye(2, dtype=int), "median")


class TestMccBinary:
    def test_perfect(self):
        assert M.mcc_binary(np.array([[5, 0], [0, 5]])) == 1.0

    def test_constant_predictor_zero(self):
        assert M.mcc_binary(np.array([[4, 0], [6, 0]])) == 0.0

    def test_hand_value(self):
        # tp=4, tn=3, fp=1, fn=2 -> 10 / sqrt(600)
        cm = np.array([[3, 1], [2, 4]])
        assert M.mcc_binary(cm) == pytest.approx(10 / math.sqrt(600))

    def test_needs_2x2(self):
        with pytest.raises(ValueError):
            M.mcc_binary(np.eye(3, dtype=int))


class TestMccMulticlass:
    def test_reduces_to_binary(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            cm = rng.integers(0, 20, size=(2, 2))
            if cm.sum() == 0:
                continue
            assert M.mcc_multiclass(cm) == pytest.approx(M.mcc_binary(cm),
                                                         abs=1e-12)

    def test_perfect(self):
        assert M.mcc_multiclass(np.diag([4, 2, 9])) == 1.0

    def test_independence_gives_zero(self):
        t = np.array([10, 20, 5], dtype=float)
        p = np.array([7, 3, 25], dtype=float)
        cm = np.outer(t, p) / 35.0
        assert M.mcc_multiclass(cm) == pytest.approx(0.0, abs=1e-12)

    def test_bounded(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            k = rng.integers(2, 6)
            cm = rng.integers(0, 30, size=(k, k))
            if cm.sum() == 0:
                continue
            assert -1.0 - 1e-12 <= M.mcc_multiclass(cm) <= 1.0 + 1e-12

    def test_one_iff_diagonal(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            k = rng.integers(2, 5)
            cm = rng.integers(0, 10, size=(k, k))
            if cm.sum() == 0 or np.trace(cm) == 0:
                continue
            is_diag = not (cm - np.diag(np.diag(cm))).any()
            if is_diag:
                assert M.mcc_multiclass(cm) == 1.0
            else:
                assert M.mcc_multiclass(cm) < 1.0


class TestOracleAgreement:
    @pytest.mark.parametrize("k", [2, 11, 20])
    @pytest.mark.parametrize("averaging", M.AVERAGING_MODES)
    def test_exact_match_with_pair_counting(self, k, averaging):
        rng = np.random.default_rng(k * 7 + len(averaging))
        for trial in range(60):
            n = int(rng.integers(1, 300))
            preds = rng.integers(0, k, size=n)
            labels = rng.integers(0, k, size=n)
            report = M.MetricsReport.from_predictions(preds, labels, k, averaging)
            acc, p, r, f1, mcc = oracle_metrics(preds.tolist(), labels.tolist(),
                                                k, averaging)
            assert report.accuracy == acc
            assert report.precision == p
            assert report.recall == r
            assert report.f1 == f1
            assert report.mcc == mcc

    def test_covariance_route_for_mcc(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            k = int(rng.integers(2, 8))
            n = int(rng.integers(2, 200))
            preds = rng.integers(0, k, size=n)
            labels = rng.integers(0, k, size=n)
            cm = M.confusion(preds, labels, k)
            assert M.mcc_multiclass(cm) == pytest.approx(
                oracle_mcc_covariance(preds, labels, k), abs=1e-10)


class TestIdentities:
    @given(st.integers(min_value=2, max_value=8), st.integers(min_value=0, max_value=9999))
    @settings(max_examples=60, deadline=None)
    def test_micro_equals_accuracy(self, k, seed):
        rng = np.random.default_rng(seed)
        cm = rng.integers(0, 25, size=(k, k))
        if cm.sum() == 0:
            return
        p, r, f1 = M.prf1(cm, "micro")
        acc = M.accuracy(cm)
        assert p == acc and r == acc and f1 == pytest.approx(acc, abs=1e-15)

    @given(st.integers(min_value=2, max_value=8), st.integers(min_value=0, max_value=9999))
    @settings(max_examples=60, deadline=None)
    def test_weighted_recall_equals_accuracy(self, k, seed):
        rng = np.random.default_rng(seed)
        cm = rng.integers(0, 25, size=(k, k))
        if cm.sum() == 0:
            return
        _, r, _ = M.prf1(cm, "weighted")
        assert r == pytest.approx(M.accuracy(cm), abs=1e-15)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        k = 5
        preds = rng.integers(0, k, size=200)
        labels = rng.integers(0, k, size=200)
        perm = rng.permutation(k)
        base = M.MetricsReport.from_predictions(preds, labels, k)
        shuf = M.MetricsReport.from_predictions(perm[preds], perm[labels], k)
        for field in ("accuracy", "precision", "recall", "f1", "mcc"):
            assert getattr(base, field) == pytest.approx(getattr(shuf, field),
                                                         abs=1e-12)


class TestReportFormats:
    def test_tsv_and_table(self):
        report = M.MetricsReport.from_predictions(
            [0, 1, 1, 0], [0, 1, 0, 0], 2, class_names=["neg", "pos"])
        tsv = report.to_tsv()
        assert tsv.startswith("metric\tvalue")
        assert "accuracy\t0.75" in tsv
        assert "neg\t" in tsv
        table = report.format_table()
        assert "75.00" in table          # two-decimal percentages
        assert "weighted" in table
