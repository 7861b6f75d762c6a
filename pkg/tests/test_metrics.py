import csv
import json
import math

import numpy as np
import pytest

from asap.metrics import (
    MetricsError,
    confusion_matrix,
    evaluate,
    paired_t_test,
    per_turn_breakdown,
    summarize_contributions,
)


class TestConfusionMatrix:
    def test_rows_gold_cols_predicted(self):
        mat = confusion_matrix([1, 1, 2, 0], [1, 2, 2, 0], 3)
        assert mat.tolist() == [[1, 0, 0], [0, 1, 0], [0, 1, 1]]
        assert mat.sum() == 4

    def test_length_mismatch(self):
        with pytest.raises(MetricsError):
            confusion_matrix([0, 1], [0], 2)

    def test_label_out_of_range(self):
        with pytest.raises(MetricsError):
            confusion_matrix([0, 3], [0, 1], 3)

    def test_empty_rejected(self):
        with pytest.raises(MetricsError):
            confusion_matrix([], [], 3)


class TestEvaluate:
    def test_hand_computed_example(self):
        rep = evaluate([1, 1, 2, 0], [1, 2, 2, 0], 3)
        assert abs(rep.accuracy - 0.75) < 1e-9
        assert abs(rep.macro_precision - (1 + 0.5 + 1) / 3) < 1e-9
        assert abs(rep.macro_recall - (1 + 1 + 0.5) / 3) < 1e-9
        assert abs(rep.macro_f1 - (1 + 2 / 3 + 2 / 3) / 3) < 1e-9

    def test_perfect_predictions(self):
        rep = evaluate([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert rep.accuracy == rep.macro_precision == rep.macro_recall == rep.macro_f1 == 1.0

    def test_single_class_predictor_on_balanced_gold(self):
        rep = evaluate([0] * 6, [0, 0, 1, 1, 2, 2], 3)
        assert abs(rep.accuracy - 1 / 3) < 1e-9
        assert abs(rep.macro_f1 - 1 / 6) < 1e-9

    def test_absent_class_contributes_zero(self):
        rep = evaluate([0, 0], [0, 0], 3)
        assert rep.per_class[1].f1 == rep.per_class[2].f1 == 0.0
        assert abs(rep.macro_f1 - 1 / 3) < 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        preds = rng.integers(0, 3, size=60)
        golds = rng.integers(0, 3, size=60)
        base = evaluate(preds, golds, 3)
        for seed in range(10):
            order = np.random.default_rng(seed).permutation(60)
            rep = evaluate(preds[order], golds[order], 3)
            assert rep.to_dict() == base.to_dict()

    def test_relabeling_permutes_per_class_keeps_macros(self):
        rng = np.random.default_rng(1)
        preds = rng.integers(0, 3, size=80)
        golds = rng.integers(0, 3, size=80)
        base = evaluate(preds, golds, 3)
        perm = np.array([2, 0, 1])
        rep = evaluate(perm[preds], perm[golds], 3)
        assert abs(rep.macro_f1 - base.macro_f1) < 1e-12
        assert abs(rep.macro_precision - base.macro_precision) < 1e-12
        for k in range(3):
            assert rep.per_class[perm[k]].f1 == base.per_class[k].f1

    def test_micro_accuracy_is_trace_over_total(self):
        rng = np.random.default_rng(2)
        preds = rng.integers(0, 4, size=50)
        golds = rng.integers(0, 4, size=50)
        mat = confusion_matrix(preds, golds, 4)
        rep = evaluate(preds, golds, 4)
        assert rep.accuracy == np.trace(mat) / mat.sum()

    def test_report_serialization(self, tmp_path):
        rep = evaluate([1, 1, 2, 0], [1, 2, 2, 0], 3)
        rep.per_depth = [{"turn": 4, "accuracy": 0.5, "macro_f1": 0.25, "support": 2}]
        jpath, cpath = tmp_path / "r.json", tmp_path / "r.csv"
        rep.save_json(jpath)
        rep.save_csv(cpath)
        loaded = json.loads(jpath.read_text())
        assert loaded["accuracy"] == 0.75 and len(loaded["per_class"]) == 3
        rows = list(csv.reader(cpath.read_text().splitlines()))
        assert rows[1][0] == "overall" and rows[2][0] == "depth"


class TestPerTurnBreakdown:
    def test_all_depth_one_min_turn_one(self):
        table = per_turn_breakdown([1, 2, 0], [1, 2, 1], [1, 1, 1], 3, min_turn=1)
        assert len(table["rows"]) == 1
        overall = evaluate([1, 2, 0], [1, 2, 1], 3)
        assert table["rows"][0]["accuracy"] == overall.accuracy
        assert table["rows"][0]["macro_f1"] == overall.macro_f1

    def test_shallow_rows_suppressed_but_counted(self):
        table = per_turn_breakdown([0, 1, 2], [0, 1, 2], [1, 2, 3], 3, min_turn=4)
        assert table["rows"] == [] and table["total_turns"] == 3

    def test_unpopulated_depth_omitted(self):
        table = per_turn_breakdown([0, 1], [0, 1], [4, 6], 2, min_turn=4)
        assert [r["turn"] for r in table["rows"]] == [4, 6]

    def test_zero_based_turns_rejected(self):
        with pytest.raises(MetricsError):
            per_turn_breakdown([0], [0], [0], 2)


class TestPairedT:
    def test_identical_scores(self):
        t, p = paired_t_test([0.5, 0.6, 0.7], [0.5, 0.6, 0.7])
        assert (t, p) == (0.0, 1.0)

    def test_constant_positive_difference(self):
        t, p = paired_t_test([2.0, 3.0, 4.0, 5.0], [1.0, 2.0, 3.0, 4.0])
        assert math.isinf(t) and t > 0 and p == 0.0

    def test_hand_computed_example(self):
        # differences [1, -1, 2, 0]: mean 0.5, sd 1.29099
        t, p = paired_t_test([1.0, 0.0, 2.0, 1.0], [0.0, 1.0, 0.0, 1.0])
        assert abs(t - 0.7745966) < 1e-6
        assert abs(p - 0.495) < 1e-3

    def test_swap_negates_t_keeps_p(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=12)
        b = rng.normal(size=12)
        t1, p1 = paired_t_test(a, b)
        t2, p2 = paired_t_test(b, a)
        assert abs(t1 + t2) < 1e-12 and abs(p1 - p2) < 1e-12

    def test_p_in_unit_interval(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            a = rng.normal(size=6)
            b = rng.normal(size=6)
            _, p = paired_t_test(a, b)
            assert 0.0 <= p <= 1.0

    def test_too_few_pairs(self):
        with pytest.raises(MetricsError):
            paired_t_test([1.0], [0.0])


class TestContributionSummary:
    def test_quartiles(self):
        s = summarize_contributions([0.1, 0.2, 0.3, 0.4, 0.5])
        assert s["min"] == 0.1 and s["max"] == 0.5
        assert abs(s["median"] - 0.3) < 1e-12
        assert abs(s["mean"] - 0.3) < 1e-12
        assert s["count"] == 5

    def test_empty_rejected(self):
        with pytest.raises(MetricsError):
            summarize_contributions([])
