"""ROC and F1 evaluation over detection logs.

Per keyword, positives contribute their best per-utterance score (a missed
utterance scores -inf and is a miss at every threshold) and the negative
stream contributes every firing score. The ROC sweep visits the union of
observed scores; per-keyword curves are step-interpolated onto a shared
false-alarms-per-hour grid and averaged into the overall curve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import ManifestEntry

FA_GRID = (0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0)

MISS = float("-inf")


@dataclass
class KeywordScores:
    keyword: str
    positives: list[float]   # one entry per positive utterance (best score)
    negatives: list[float]   # every firing on the negative stream

    @property
    def n_pos(self) -> int:
        return len(self.positives)


@dataclass
class RocPoint:
    threshold: float
    fa_per_hour: float
    frr: float


@dataclass
class RocCurve:
    per_keyword: dict
    grid: tuple
    overall: list  # (fa_per_hour_grid, mean_frr)
    hours: float


def _segments_overlap(a_lo, a_hi, b_lo, b_hi) -> bool:
    return a_lo <= b_hi and b_lo <= a_hi


def collect_scores(
    records: list[dict],
    positive_manifest: list[ManifestEntry],
    negative_stream_ids: set[str],
    score_field: str = "stage2",
    accepted_only: bool = False,
    require_overlap: bool = False,
    subsampling: int = 4,
) -> dict[str, KeywordScores]:
    """Group detection records into per-keyword positive/negative score lists."""
    labeled = [e for e in positive_manifest if e.keyword]
    keywords = sorted({e.keyword for e in labeled})
    if not keywords:
        raise ValueError("no labeled positive samples")
    by_stream_kw: dict[tuple[str, str], list[dict]] = {}
    for rec in records:
        if accepted_only and not rec.get("accepted", True):
            continue
        by_stream_kw.setdefault((rec["stream"], rec["keyword"]), []).append(rec)

    out: dict[str, KeywordScores] = {k: KeywordScores(k, [], []) for k in keywords}
    for entry in labeled:
        recs = by_stream_kw.get((entry.utt_id, entry.keyword), [])
        if require_overlap and entry.keyword_span is not None:
            lo, hi = entry.keyword_span
            recs = [r for r in recs
                    if _segments_overlap(r["start"] * subsampling,
                                         r["end"] * subsampling + subsampling - 1, lo, hi)]
        best = max((r[score_field] for r in recs), default=MISS)
        out[entry.keyword].positives.append(best)
    for (stream, kw), recs in by_stream_kw.items():
        if stream in negative_stream_ids and kw in out:
            out[kw].negatives.extend(r[score_field] for r in recs)
    for k, ks in out.items():
        if ks.n_pos == 0:
            raise ValueError(f"keyword {k!r} has no positive samples")
    return out


def keyword_roc(scores: KeywordScores, hours: float) -> list[RocPoint]:
    """Sweep the union of observed scores from strictest to loosest."""
    pos = np.asarray(scores.positives, dtype=float)
    neg = np.asarray(scores.negatives, dtype=float)
    observed = sorted({s for s in np.concatenate([pos, neg]) if math.isfinite(s)}, reverse=True)
    thresholds = [math.inf] + observed
    points = []
    for th in thresholds:
        frr = float((pos < th).mean()) if th != math.inf else 1.0
        fa = float((neg >= th).sum()) / hours
        points.append(RocPoint(th, fa, frr))
    return points


def frr_at_budget(points: list[RocPoint], fa_budget: float) -> float:
    """Lowest false-rejection rate achievable within the FA/hour budget."""
    eligible = [p.frr for p in points if p.fa_per_hour <= fa_budget]
    return min(eligible) if eligible else 1.0


def roc(score_lists: dict[str, KeywordScores], hours: float,
        grid: tuple = FA_GRID) -> RocCurve:
    if hours <= 0:
        raise ValueError("negative-stream duration must be positive")
    per_keyword = {k: keyword_roc(s, hours) for k, s in score_lists.items()}
    overall = []
    for g in grid:
        frrs = [frr_at_budget(points, g) for points in per_keyword.values()]
        overall.append((g, float(np.mean(frrs))))
    return RocCurve(per_keyword=per_keyword, grid=tuple(grid), overall=overall, hours=hours)


@dataclass
class F1Report:
    threshold: float
    per_keyword: dict          # keyword -> (f1, tp, fp, fn)
    macro: float
    by_length: dict            # keyword word-count -> mean f1


def f1_at(score_lists: dict[str, KeywordScores], threshold: float) -> F1Report:
    if not math.isfinite(threshold):
        raise ValueError("threshold must be finite")
    per_keyword = {}
    for k, s in score_lists.items():
        tp = sum(1 for x in s.positives if x >= threshold)
        fn = s.n_pos - tp
        fp = sum(1 for x in s.negatives if x >= threshold)
        denom = 2 * tp + fp + fn
        f1 = (2.0 * tp / denom) if denom else 0.0
        per_keyword[k] = (f1, tp, fp, fn)
    macro = float(np.mean([v[0] for v in per_keyword.values()]))
    by_length: dict[int, list[float]] = {}
    for k, (f1, *_rest) in per_keyword.items():
        by_length.setdefault(len(k.split()), []).append(f1)
    return F1Report(
        threshold=threshold,
        per_keyword=per_keyword,
        macro=macro,
        by_length={n: float(np.mean(v)) for n, v in sorted(by_length.items())},
    )


def best_f1_threshold(score_lists: dict[str, KeywordScores]) -> tuple[float, float]:
    """Threshold (over observed scores) maximizing macro F1; ties take the
    stricter threshold. Returns (threshold, macro_f1)."""
    observed = set()
    for s in score_lists.values():
        observed.update(x for x in s.positives if math.isfinite(x))
        observed.update(x for x in s.negatives if math.isfinite(x))
    if not observed:
        return 0.0, 0.0
    best_th, best_macro = None, -1.0
    for th in sorted(observed, reverse=True):
        macro = f1_at(score_lists, th).macro
        if macro > best_macro:
            best_th, best_macro = th, macro
    return float(best_th), float(best_macro)


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("keyword,fa_per_hour,frr\n")
        for g, frr in curve.overall:
            f.write(f"OVERALL,{g},{frr:.6f}\n")
        for k, points in sorted(curve.per_keyword.items()):
            for p in points:
                f.write(f"{k},{p.fa_per_hour:.6f},{p.frr:.6f}\n")


def write_f1_csv(path, report: F1Report) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("keyword,words,f1,tp,fp,fn,threshold\n")
        f.write(f"MACRO,,{report.macro:.6f},,,,{report.threshold:.6f}\n")
        for n, v in report.by_length.items():
            f.write(f"LENGTH_{n},{n},{v:.6f},,,,\n")
        for k, (f1, tp, fp, fn) in sorted(report.per_keyword.items()):
            f.write(f"{k},{len(k.split())},{f1:.6f},{tp},{fp},{fn},\n")
