"""ROC/F1 harness against brute-force per-threshold recounting."""

import math

import numpy as np
import pytest

from twopass_kws.data import ManifestEntry
from twopass_kws.evaluate import (
    FA_GRID,
    KeywordScores,
    best_f1_threshold,
    collect_scores,
    f1_at,
    frr_at_budget,
    keyword_roc,
    roc,
)


def rec(stream, keyword, score, start=0, end=4, accepted=True):
    return {"stream": stream, "keyword": keyword, "stage2": score, "stage1": score,
            "start": start, "end": end, "accepted": accepted}


class TestCollect:
    def test_hand_built_example(self):
        # two positives scoring 0.9 / 0.2, one negative firing 0.5 over 1 hour:
        # at threshold 0.4 -> FRR 0.5, FA 1.0/h
        manifest = [ManifestEntry("p1", "x", keyword="k"), ManifestEntry("p2", "x", keyword="k")]
        records = [rec("p1", "k", 0.9), rec("p2", "k", 0.2), rec("n1", "k", 0.5)]
        scores = collect_scores(records, manifest, {"n1"})
        points = keyword_roc(scores["k"], hours=1.0)
        at = [p for p in points if p.threshold <= 0.4001 and p.threshold >= 0.399]
        frr_04 = float(np.mean([s < 0.4 for s in scores["k"].positives]))
        fa_04 = sum(1 for s in scores["k"].negatives if s >= 0.4) / 1.0
        assert frr_04 == 0.5 and fa_04 == 1.0

    def test_positive_with_no_detection_is_a_miss_everywhere(self):
        manifest = [ManifestEntry("p1", "x", keyword="k"), ManifestEntry("p2", "x", keyword="k")]
        records = [rec("p1", "k", 0.9)]
        scores = collect_scores(records, manifest, set())
        assert scores["k"].positives.count(float("-inf")) == 1
        points = keyword_roc(scores["k"], hours=1.0)
        assert all(p.frr >= 0.5 for p in points)

    def test_zero_negative_firings_zero_fa(self):
        manifest = [ManifestEntry("p1", "x", keyword="k")]
        scores = collect_scores([rec("p1", "k", 0.7)], manifest, {"n1"})
        points = keyword_roc(scores["k"], hours=2.0)
        assert all(p.fa_per_hour == 0.0 for p in points)

    def test_keyword_without_positives_rejected(self):
        manifest = [ManifestEntry("p1", "x", keyword="k")]
        with pytest.raises(ValueError):
            collect_scores([], [e for e in manifest if e.keyword != "k"], set())

    def test_best_score_per_positive_utterance(self):
        manifest = [ManifestEntry("p1", "x", keyword="k")]
        records = [rec("p1", "k", 0.3), rec("p1", "k", 0.8), rec("p1", "other", 0.99)]
        scores = collect_scores(records, manifest, set())
        assert scores["k"].positives == [0.8]

    def test_overlap_flag_filters_misplaced_firings(self):
        manifest = [ManifestEntry("p1", "x", keyword="k", keyword_span=(40, 79))]
        inside = rec("p1", "k", 0.6, start=11, end=19)   # frames 44..79 after x4
        outside = rec("p1", "k", 0.9, start=0, end=5)    # frames 0..23
        scores = collect_scores([inside, outside], manifest, set(), require_overlap=True)
        assert scores["k"].positives == [0.6]
        scores2 = collect_scores([inside, outside], manifest, set(), require_overlap=False)
        assert scores2["k"].positives == [0.9]


def brute_force_counts(scores: KeywordScores, th: float, hours: float):
    tp = sum(1 for s in scores.positives if s >= th)
    fn = len(scores.positives) - tp
    fp = sum(1 for s in scores.negatives if s >= th)
    return tp, fn, fp, (fp / hours), (fn / len(scores.positives))


class TestRoc:
    def test_sweep_equals_bruteforce_recount(self):
        rng = np.random.default_rng(3)
        scores = KeywordScores("k", list(rng.normal(size=30)), list(rng.normal(size=20) - 1.0))
        hours = 0.5
        points = keyword_roc(scores, hours)
        for p in points:
            if not math.isfinite(p.threshold):
                continue
            _tp, _fn, _fp, fa, frr = brute_force_counts(scores, p.threshold, hours)
            assert fa == p.fa_per_hour and frr == p.frr

    def test_single_keyword_overall_equals_own_curve(self):
        rng = np.random.default_rng(5)
        s = KeywordScores("k", list(rng.normal(size=15) + 1), list(rng.normal(size=10)))
        curve = roc({"k": s}, hours=1.0)
        for g, frr in curve.overall:
            assert frr == frr_at_budget(curve.per_keyword["k"], g)

    def test_identical_keywords_average_to_same(self):
        rng = np.random.default_rng(6)
        pos, neg = list(rng.normal(size=12) + 1), list(rng.normal(size=9))
        curve = roc({"a": KeywordScores("a", pos, neg), "b": KeywordScores("b", pos, neg)},
                    hours=1.0)
        solo = roc({"a": KeywordScores("a", pos, neg)}, hours=1.0)
        assert [f for _, f in curve.overall] == [f for _, f in solo.overall]

    def test_overall_monotone_nonincreasing(self):
        rng = np.random.default_rng(7)
        lists = {f"k{i}": KeywordScores(f"k{i}", list(rng.normal(size=10) + 0.5),
                                        list(rng.normal(size=25))) for i in range(4)}
        curve = roc(lists, hours=0.25)
        frrs = [f for _, f in curve.overall]
        assert frrs == sorted(frrs, reverse=True)
        assert all(0.0 <= f <= 1.0 for f in frrs)

    def test_per_keyword_curve_monotone_along_sweep(self):
        rng = np.random.default_rng(8)
        s = KeywordScores("k", list(rng.normal(size=20)), list(rng.normal(size=15)))
        points = keyword_roc(s, hours=1.0)
        fas = [p.fa_per_hour for p in points]
        frrs = [p.frr for p in points]
        assert fas == sorted(fas)
        assert frrs == sorted(frrs, reverse=True)

    def test_grid_default(self):
        assert FA_GRID == (0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0)


class TestF1:
    def test_all_detected_no_fp_is_one(self):
        s = {"k": KeywordScores("k", [0.9, 0.8], [])}
        assert f1_at(s, 0.5).macro == 1.0

    def test_zero_detections_zero(self):
        s = {"k": KeywordScores("k", [0.1, 0.2], [0.05])}
        assert f1_at(s, 0.5).macro == 0.0

    def test_formula_case(self):
        # TP=8, FN=2, FP=2 -> F1 = 16/20 = 0.8
        s = {"k": KeywordScores("k", [1.0] * 8 + [0.0] * 2, [1.0] * 2)}
        report = f1_at(s, 0.5)
        assert report.per_keyword["k"][0] == pytest.approx(0.8)

    def test_macro_invariant_to_ordering(self):
        rng = np.random.default_rng(11)
        lists = {f"k{i}": KeywordScores(f"k{i}", list(rng.normal(size=6) + 1),
                                        list(rng.normal(size=4))) for i in range(5)}
        rev = dict(reversed(list(lists.items())))
        assert f1_at(lists, 0.3).macro == f1_at(rev, 0.3).macro

    def test_by_length_grouping(self):
        s = {"one": KeywordScores("one", [1.0], []),
             "two words": KeywordScores("two words", [0.0], [1.0])}
        report = f1_at(s, 0.5)
        assert report.by_length == {1: 1.0, 2: 0.0}

    def test_best_threshold_maximizes(self):
        rng = np.random.default_rng(13)
        lists = {"k": KeywordScores("k", list(rng.normal(size=20) + 1.2),
                                    list(rng.normal(size=30)))}
        th, macro = best_f1_threshold(lists)
        sweep = {s for s in lists["k"].positives + lists["k"].negatives}
        best = max(f1_at(lists, t).macro for t in sweep)
        assert macro == pytest.approx(best)
        assert f1_at(lists, th).macro == pytest.approx(best)
