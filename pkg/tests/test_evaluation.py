import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cogscreen.evaluation import (ComparisonTable, MetricsReport, ScoredSet,
                                  best_accuracy_threshold, compare_models,
                                  confusion_metrics, load_scores_csv,
                                  metrics_report, roc_auc, save_scores_csv)


def _scored(scores, labels):
    return ScoredSet(
        patient_ids=tuple(f"p{i}" for i in range(len(scores))),
        scores=tuple(float(s) for s in scores),
        labels=tuple(int(l) for l in labels))


def pair_count_auc(scores, labels):
    """Brute-force oracle: (wins + 0.5 ties) / (P * N), exact integers."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1 for p in pos for n in neg if p > n)
    ties = sum(1 for p in pos for n in neg if p == n)
    return (2 * wins + ties) / (2 * len(pos) * len(neg))


def brute_force_best_accuracy(scores, labels):
    candidates = [math.inf, -math.inf]
    ss = sorted(set(scores))
    candidates += [(a + b) / 2 for a, b in zip(ss, ss[1:])]
    best = max(
        (sum((s >= t) == (l == 1) for s, l in zip(scores, labels)) / len(scores), t)
        for t in candidates)
    return best[0]


class TestRocAuc:
    def test_hand_computed_example(self):
        # pairs: (0.35+,0.1-) win, (0.35+,0.4-) loss, (0.8+,both-) wins
        s = _scored([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        assert roc_auc(s) == 0.75

    def test_perfect_separation(self):
        s = _scored([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert roc_auc(s) == 1.0

    def test_all_ties(self):
        s = _scored([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])
        assert roc_auc(s) == 0.5

    def test_single_class_errors(self):
        with pytest.raises(ValueError, match="both classes"):
            roc_auc(_scored([0.1, 0.2], [1, 1]))

    def test_oracle_equality_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(3, 50))
            scores = rng.choice([0.1, 0.25, 0.5, 0.5, 0.75, 0.9], size=n)
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            s = _scored(scores, labels)
            assert roc_auc(s) == pair_count_auc(scores.tolist(), labels.tolist())

    @given(st.lists(st.tuples(st.integers(0, 1000), st.integers(0, 1)),
                    min_size=4, max_size=30))
    @settings(max_examples=100, deadline=None)
    def test_monotone_transform_invariance(self, pairs):
        # milli-scaled scores stay distinct under the warp in float64
        scores = [s / 1000.0 for s, _ in pairs]
        labels = [l for _, l in pairs]
        if len(set(labels)) < 2:
            labels[0] = 1 - labels[0]
        base = roc_auc(_scored(scores, labels))
        warped = roc_auc(_scored([math.exp(3 * s) for s in scores], labels))
        assert warped == pytest.approx(base, abs=1e-12)

    def test_class_relabel_symmetry(self):
        rng = np.random.default_rng(1)
        scores = rng.random(20)
        labels = rng.integers(0, 2, size=20)
        labels[0], labels[1] = 0, 1
        a = roc_auc(_scored(scores, labels))
        b = roc_auc(_scored([-s for s in scores], [1 - l for l in labels]))
        assert a == pytest.approx(b, abs=1e-12)


class TestBestAccuracyThreshold:
    def test_two_point_midpoint(self):
        thr, acc = best_accuracy_threshold(_scored([0.2, 0.8], [0, 1]))
        assert thr == pytest.approx(0.5)
        assert acc == 1.0

    def test_all_positive_sentinel(self):
        thr, acc = best_accuracy_threshold(_scored([0.3, 0.7], [1, 1]))
        assert thr == -math.inf
        assert acc == 1.0

    def test_all_negative_sentinel(self):
        thr, acc = best_accuracy_threshold(_scored([0.3, 0.7], [0, 0]))
        assert thr == math.inf
        assert acc == 1.0

    def test_ties_take_higher_threshold(self):
        # any threshold below 0.5 gives accuracy 1/2; +inf also gives 1/2
        thr, acc = best_accuracy_threshold(_scored([0.5], [0]))
        assert thr == math.inf

    def test_brute_force_oracle_on_random_sets(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(2, 50))
            scores = np.round(rng.random(n), 2)
            labels = rng.integers(0, 2, size=n)
            s = _scored(scores, labels)
            thr, acc = best_accuracy_threshold(s)
            assert acc == pytest.approx(
                brute_force_best_accuracy(scores.tolist(), labels.tolist()))

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            best_accuracy_threshold(_scored([], []))


class TestMetricsReport:
    def test_confusion_identities_on_random_inputs(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(2, 40))
            s = _scored(rng.random(n), rng.integers(0, 2, size=n))
            thr = float(rng.random())
            r = metrics_report(s, thr)
            assert r.tp + r.fp + r.fn + r.tn == n
            assert r.accuracy == pytest.approx((r.tp + r.tn) / n)
            if r.tp + r.fn:
                assert r.sensitivity == pytest.approx(r.tp / (r.tp + r.fn))
            else:
                assert r.sensitivity is None
            if r.tn + r.fp:
                assert r.specificity == pytest.approx(r.tn / (r.tn + r.fp))
            if r.tp + r.fp:
                assert r.ppv == pytest.approx(r.tp / (r.tp + r.fp))
            else:
                assert r.ppv is None
            if r.tn + r.fn:
                assert r.npv == pytest.approx(r.tn / (r.tn + r.fn))

    def test_prediction_rule_inclusive(self):
        s = _scored([0.5, 0.49], [1, 0])
        r = metrics_report(s, 0.5)
        assert (r.tp, r.tn, r.fp, r.fn) == (1, 1, 0, 0)

    def test_undefined_ratios_are_none_not_nan(self):
        s = _scored([0.9, 0.8], [1, 1])
        r = metrics_report(s, 0.1)
        assert r.specificity is None and r.npv is None
        assert r.sensitivity == 1.0


class TestReferenceRows:
    """Reference comparison rows (test set of 77 with 34 positive)."""

    def test_row_zero_fp(self):
        r = confusion_metrics(tp=20, fp=0, fn=14, tn=43)
        assert r.sensitivity == pytest.approx(0.588, abs=5e-4)
        assert r.specificity == pytest.approx(1.000, abs=5e-4)
        assert r.ppv == pytest.approx(1.000, abs=5e-4)
        assert r.npv == pytest.approx(0.754, abs=5e-4)
        assert r.accuracy == pytest.approx(0.818, abs=5e-4)

    def test_row_four_fp(self):
        r = confusion_metrics(tp=26, fp=4, fn=8, tn=39)
        assert r.sensitivity == pytest.approx(0.765, abs=5e-4)
        assert r.specificity == pytest.approx(0.907, abs=5e-4)
        assert r.ppv == pytest.approx(0.867, abs=5e-4)
        assert r.npv == pytest.approx(0.830, abs=5e-4)
        assert r.accuracy == pytest.approx(0.844, abs=5e-4)

    def test_row_one_fp(self):
        r = confusion_metrics(tp=27, fp=1, fn=7, tn=42)
        assert r.sensitivity == pytest.approx(0.794, abs=5e-4)
        assert r.specificity == pytest.approx(0.977, abs=5e-4)
        assert r.ppv == pytest.approx(0.964, abs=5e-4)
        assert r.npv == pytest.approx(0.857, abs=5e-4)
        assert r.accuracy == pytest.approx(0.896, abs=5e-4)


class TestComparison:
    def _report(self, seed):
        rng = np.random.default_rng(seed)
        s = _scored(rng.random(20), rng.integers(0, 2, size=20))
        return metrics_report(s, 0.5)

    def test_four_rows_eight_columns(self):
        table = compare_models([(f"m{i}", self._report(i)) for i in range(4)])
        md = table.to_markdown()
        lines = md.strip().split("\n")
        assert len(lines) == 2 + 4
        assert lines[0].count("|") == 10  # model + 8 metric columns

    def test_single_row(self):
        table = compare_models([("only", self._report(0))])
        assert len(table.rows) == 1

    def test_machine_round_trip_full_precision(self):
        table = compare_models([(f"m{i}", self._report(i)) for i in range(3)])
        parsed = ComparisonTable.from_json(table.to_json())
        for (n1, r1), (n2, r2) in zip(table.rows, parsed.rows):
            assert n1 == n2 and r1 == r2

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compare_models([])


class TestScoresCsv:
    def test_round_trip(self, tmp_path):
        s = _scored([0.123456789, 0.5, 1 / 3], [1, 0, 1])
        path = tmp_path / "scores.csv"
        save_scores_csv(s, path)
        assert load_scores_csv(path) == s

    def test_header_enforced(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError, match="header"):
            load_scores_csv(path)
