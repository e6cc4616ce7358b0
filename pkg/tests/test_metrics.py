import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tradi import metrics as M
from tradi.errors import ContractError, DataFormatError
from tradi.verify import HAND_DUMP, brute_force_ece, brute_force_roc


def cls_dump(labels, preds, conf, in_dist=None):
    n = len(labels)
    return M.ClassificationDump(np.arange(n), labels, preds, conf,
                                np.ones(n, bool) if in_dist is None else np.asarray(in_dist, bool))


def hand_dump():
    return cls_dump(HAND_DUMP["labels"], HAND_DUMP["preds"], HAND_DUMP["confidence"], HAND_DUMP["in_dist"])


class TestRegression:
    def test_perfect(self):
        d = M.RegressionDump([0, 1], [1.0, 2.0], [[1.0], [2.0]], [[1.0], [1.0]])
        assert M.rmse(d) == 0.0

    def test_two_point(self):
        d = M.RegressionDump([0, 1], [2.0, 0.0], [[0.0], [2.0]], [[1.0], [1.0]])
        assert M.rmse(d) == pytest.approx(2.0)

    def test_mixture_nll_single_component(self):
        d = M.RegressionDump([0], [0.0], [[0.0]], [[1.0]])
        assert M.regression_mixture_nll(d) == pytest.approx(0.5 * np.log(2 * np.pi))

    def test_rmse_uses_mixture_mean(self):
        d = M.RegressionDump([0], [1.0], [[0.0, 2.0]], [[1.0, 1.0]])
        assert M.rmse(d) == 0.0

    def test_empty(self):
        with pytest.raises(ContractError):
            M.rmse(M.RegressionDump([], [], np.zeros((0, 1)), np.zeros((0, 1))))

    def test_mismatched(self):
        with pytest.raises(ContractError):
            M.RegressionDump([0, 1], [1.0, 2.0], [[1.0]], [[1.0]])


class TestClassificationScalars:
    def test_perfect_accuracy(self):
        assert M.accuracy(cls_dump([0, 1, 2], [0, 1, 2], [0.9, 0.8, 0.7])) == 1.0

    def test_ood_rows_never_correct(self):
        d = cls_dump([0, -1], [0, -1], [0.9, 0.9], [True, False])
        assert d.correct.tolist() == [True, False]

    def test_nll(self):
        probs = np.array([[0.8, 0.2], [0.4, 0.6]])
        d = M.ClassificationDump.from_probs(probs, [0, 0])
        assert M.classification_nll(d) == pytest.approx(-(np.log(0.8) + np.log(0.4)) / 2)

    def test_nll_ignores_ood(self):
        d = M.ClassificationDump.from_probs(np.array([[0.8, 0.2], [0.5, 0.5]]), [0, 1], [True, False])
        assert M.classification_nll(d) == pytest.approx(-np.log(0.8))
        assert d.labels.tolist() == [0, M.OOD_LABEL]

    def test_confidence_range(self):
        with pytest.raises(ContractError):
            cls_dump([0], [0], [1.5])


class TestECE:
    def test_confident_and_right(self):
        assert M.ece(cls_dump([0, 1, 1], [0, 1, 1], [1.0, 1.0, 1.0])) == 0.0

    def test_calibrated_construction(self):
        bins = 10
        labels, preds, conf = [], [], []
        for b in range(bins):
            c = (b + 0.5) / bins
            k = int(round(c * 100))
            labels += [1] * 100
            preds += [1] * k + [0] * (100 - k)
            conf += [c] * 100
        d = cls_dump(labels, preds, conf)
        assert M.ece(d, bins) < 1 / (2 * bins)

    def test_hand_value(self):
        # two bins: {0.3 wrong, 0.4 right} and {0.9 right, 0.8 wrong}
        d = cls_dump([0, 0, 0, 0], [1, 0, 0, 1], [0.3, 0.4, 0.9, 0.8])
        assert M.ece(d, 2) == pytest.approx(0.5 * abs(0.5 - 0.35) + 0.5 * abs(0.5 - 0.85))

    def test_bin_edges_are_right_closed(self):
        # 0.5 belongs to the lower of two bins, 0 to the first
        assert M._bin_index(np.array([0.0, 0.5, 0.50001, 1.0]), 2).tolist() == [0, 0, 1, 1]

    @pytest.mark.parametrize("bins", [1, 3, 5, 15])
    def test_hand_dump_brute_force(self, bins):
        d = hand_dump()
        assert M.ece(d, bins) == pytest.approx(brute_force_ece(d.confidence.tolist(), d.correct.tolist(), bins),
                                               abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 20).map(lambda v: v / 20), st.booleans()), min_size=1, max_size=40),
           st.integers(1, 15))
    def test_random_dumps_brute_force(self, rows, bins):
        conf = [r[0] for r in rows]
        correct = [r[1] for r in rows]
        d = cls_dump([0] * len(rows), [0 if c else 1 for c in correct], conf)
        assert M.ece(d, bins) == pytest.approx(brute_force_ece(conf, correct, bins), abs=1e-12)


class TestROC:
    def test_perfect_separation(self):
        assert M.roc_metrics([0.9, 0.8, 0.2, 0.1], [True, True, False, False]) == (1.0, 1.0, 0.0)

    def test_constant_scores(self):
        auc, _, _ = M.roc_metrics(np.full(6, 0.3), [True, False] * 3)
        assert auc == 0.5

    def test_six_example_hand_dump(self):
        scores = np.array([0.9, 0.7, 0.7, 0.4, 0.3, 0.1])
        ood = np.array([True, False, True, True, False, False])
        got = M.roc_metrics(scores, ood)
        assert got == pytest.approx(brute_force_roc(scores, ood), abs=1e-12)
        # pairs: 9 pos/neg; wins: 0.9 beats 3, 0.7 beats 2 + ties 1, 0.4 beats 2
        assert got[0] == pytest.approx((3 + 2 + 0.5 + 2) / 9)

    def test_hand_dump_ood_metrics(self):
        d = hand_dump()
        assert M.ood_metrics(d) == pytest.approx(brute_force_roc(1 - d.confidence, ~d.in_dist), abs=1e-12)

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 8), st.booleans()), min_size=2, max_size=30))
    def test_random_brute_force(self, rows):
        scores = np.array([r[0] / 8 for r in rows])
        ood = np.array([r[1] for r in rows])
        if ood.all() or not ood.any():
            with pytest.raises(ContractError):
                M.roc_metrics(scores, ood)
            return
        assert M.roc_metrics(scores, ood) == pytest.approx(brute_force_roc(scores, ood), abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(-1000, 1000), min_size=4, max_size=20, unique=True))
    def test_monotone_transform_invariance(self, vals):
        s = np.array(vals, dtype=np.float64)
        ood = np.arange(s.size) % 2 == 0
        a = M.roc_metrics(s, ood)
        b = M.roc_metrics(s ** 3 + 2 * s, ood)
        assert a == pytest.approx(b, abs=1e-12)

    def test_single_class(self):
        with pytest.raises(ContractError):
            M.roc_metrics([0.1, 0.2], [False, False])


class TestCurves:
    def test_avc_zero_threshold_is_accuracy(self):
        d = hand_dump()
        c = M.accuracy_vs_confidence(d)
        assert c.x[0] == 0.0 and c.value[0] == pytest.approx(M.accuracy(d)) and c.support[0] == len(d)

    def test_avc_support_non_increasing(self):
        c = M.accuracy_vs_confidence(hand_dump(), np.linspace(0, 1, 101))
        assert np.all(np.diff(c.support) <= 0)

    def test_avc_four_examples(self):
        d = cls_dump([0, 0, 0, 0], [0, 1, 0, 1], [0.2, 0.4, 0.6, 0.8])
        c = M.accuracy_vs_confidence(d, [0.0, 0.3, 0.5, 0.7, 0.9])
        assert c.support.tolist() == [4, 3, 2, 1, 0]
        assert c.value[:4].tolist() == [0.5, 1 / 3, 0.5, 0.0] and np.isnan(c.value[4])

    def test_calibration_single_bin(self):
        d = hand_dump()
        c = M.calibration_curve(d, 1)
        assert c.value[0] == pytest.approx(M.accuracy(d)) and c.support[0] == len(d)

    def test_calibration_empty_bins_marked(self):
        c = M.calibration_curve(cls_dump([0, 0], [0, 0], [0.95, 0.99]), 5)
        assert np.isnan(c.value[:4]).all() and c.support.tolist() == [0, 0, 0, 0, 2] and c.value[4] == 1.0

    def test_calibration_ten_examples(self):
        d = hand_dump()
        c = M.calibration_curve(d, 4)
        for b in range(4):
            lo, hi = b / 4, (b + 1) / 4
            sel = [i for i in range(10) if (lo < d.confidence[i] <= hi) or (b == 0 and d.confidence[i] == 0)]
            assert c.support[b] == len(sel)
            if sel:
                assert c.value[b] == pytest.approx(d.correct[sel].mean())
        assert c.support.sum() == len(d)

    def test_count_binning_balanced(self):
        d = hand_dump()
        c = M.calibration_curve(d, 5, "count")
        assert c.support.tolist() == [2] * 5 and np.all(np.diff(c.x) >= 0)

    def test_precision_curve(self):
        d = cls_dump([0, 1, 1, 0], [0, 1, 0, 0], [0.9, 0.9, 0.9, 0.9])
        c = M.precision_calibration_curve(d, 1)
        # class 0 predicted thrice, right twice; class 1 once, right once
        assert c.value[0] == pytest.approx((2 / 3 + 1) / 2)

    def test_unknown_binning(self):
        with pytest.raises(ContractError):
            M.calibration_curve(hand_dump(), 3, "quantile")


class TestDumpFiles:
    def test_classification_round_trip(self, tmp_path):
        d = M.ClassificationDump.from_probs(np.array([[0.7, 0.3], [0.1, 0.9], [0.5, 0.5]]), [0, 0, 1],
                                            [True, True, False])
        back = M.read_dump(M.write_dump(tmp_path / "c.dump.csv", d))
        assert back.labels.tolist() == d.labels.tolist() and back.preds.tolist() == d.preds.tolist()
        assert np.array_equal(back.confidence, d.confidence) and np.array_equal(back.in_dist, d.in_dist)
        assert np.array_equal(back.p_label[:2], d.p_label[:2]) and np.isnan(back.p_label[2])

    def test_header(self, tmp_path):
        p = M.write_dump(tmp_path / "c.csv", cls_dump([0], [0], [0.5]))
        assert p.read_text().splitlines()[0] == "id,label,pred,confidence,in_dist,p_label"

    def test_five_column_dump_accepted(self, tmp_path):
        p = tmp_path / "old.csv"
        p.write_text("id,label,pred,confidence,in_dist\n0,1,1,0.75,1\n1,-1,0,0.6,0\n")
        d = M.read_dump(p)
        assert d.p_label is None and M.accuracy(d) == 0.5

    def test_regression_round_trip(self, tmp_path):
        d = M.RegressionDump(["a", "b"], [1.0, 2.0], [[0.5, 1.5], [2.0, 2.5]], [[0.1, 0.2], [0.3, 0.4]])
        back = M.read_dump(M.write_dump(tmp_path / "r.csv", d))
        assert np.array_equal(back.mus, d.mus) and np.array_equal(back.vars, d.vars)
        assert back.ids.tolist() == ["a", "b"] and M.rmse(back) == M.rmse(d)

    @pytest.mark.parametrize("text", ["", "x,y\n1,2\n", "id,label,pred,confidence,in_dist\n0,a,1,0.5,1\n"])
    def test_malformed(self, tmp_path, text):
        p = tmp_path / "bad.csv"
        p.write_text(text)
        with pytest.raises(DataFormatError):
            M.read_dump(p)

    def test_curve_file(self, tmp_path):
        c = M.calibration_curve(cls_dump([0, 0], [0, 0], [0.95, 0.99]), 2)
        lines = M.write_curve(tmp_path / "c.csv", c).read_text().splitlines()
        assert lines[0] == "x,value,support" and lines[1] == "0.25,,0" and lines[2] == "0.75,1.0,2"
