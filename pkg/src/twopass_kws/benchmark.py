"""Desk-scale benchmark: train the baseline and the two-pass model on a
synthetic corpus and score four systems on the same streams.

Systems, mirroring the ablation ladder:
  baseline   plain CTC model (no keyword conditioning), first-stage score
  encoder    keyword-biased model, first-stage score only
  causal     two-pass, decoder scores against streaming encoder output
  full       two-pass, decoder scores against full-context re-encoding

Stage-1-only systems are scored from score traces: an event is a local
maximum of the per-chunk search score with a minimum separation, so the
event set is threshold-independent and ROC sweeps are exact. Two-pass
systems fix the stage-1 threshold from the development split and sweep the
decoder score.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .cascade import CascadeConfig, StreamState
from .data import BuiltCorpus, CorpusSpec, ManifestEntry, build_corpus
from .evaluate import KeywordScores, best_f1_threshold, collect_scores, f1_at, frr_at_budget, roc
from .frontend import synth_silence
from .keywords import Keyword, Lexicon
from .model import KeywordSpotter, ModelConfig
from .nn import no_grad
from .nn.tensor import Tensor
from .train import Corpus, TrainConfig, train_stage


@dataclass
class BenchmarkConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model_dim: int = 64
    encoder_layers: int = 4
    ffn_dim: int = 256
    n_heads: int = 4
    conv_channels: int = 8
    decoder_ffn_dim: int = 128
    stage1_epochs: int = 6
    stage2_epochs: int = 6
    train: TrainConfig = field(default_factory=TrainConfig)
    cascade: CascadeConfig = field(default_factory=lambda: CascadeConfig(
        stage1_threshold=-1e8, stage2_threshold=-1e8, chunk_size=4, window=50, refractory=25))
    stage1_relax: float = 0.5  # loosen the fixed stage-1 gate below its own optimum
    fa_budget: float = 0.5     # grid point for the wake-up comparison


def _model_config(bench: BenchmarkConfig, lexicon: Lexicon, seed: int, use_bias: bool) -> ModelConfig:
    return ModelConfig(
        vocab_size=lexicon.vocab_size,
        feat_dim=bench.corpus.feat_dim,
        model_dim=bench.model_dim,
        n_heads=bench.n_heads,
        encoder_layers=bench.encoder_layers,
        ffn_dim=bench.ffn_dim,
        conv_channels=bench.conv_channels,
        decoder_ffn_dim=bench.decoder_ffn_dim,
        use_bias=use_bias,
        seed=seed,
    )


def stage1_events(trace: list[tuple[int, int, float]], refractory: int) -> dict[int, list[tuple[int, float]]]:
    """Local maxima of the per-keyword score trace with minimum separation."""
    by_kw: dict[int, list[tuple[int, float]]] = {}
    for frame, kid, score in trace:
        by_kw.setdefault(kid, []).append((frame, score))
    events: dict[int, list[tuple[int, float]]] = {}
    for kid, rows in by_kw.items():
        rows.sort()
        scores = np.array([s for _, s in rows])
        frames = np.array([f for f, _ in rows])
        picked: list[tuple[int, float]] = []
        order = np.argsort(scores)[::-1]
        taken = np.zeros(len(rows), dtype=bool)
        for i in order:
            if taken[i]:
                continue
            picked.append((int(frames[i]), float(scores[i])))
            taken |= np.abs(frames - frames[i]) <= refractory
        picked.sort()
        events[kid] = picked
    return events


def _event_records(stream_id: str, keywords: list[Keyword],
                   events: dict[int, list[tuple[int, float]]]) -> list[dict]:
    out = []
    for kid, rows in events.items():
        for frame, score in rows:
            out.append({
                "stream": stream_id, "keyword_id": kid, "keyword": keywords[kid].text,
                "start": max(0, frame - 1), "end": frame, "trigger": frame,
                "stage1": score, "stage2": score, "accepted": True, "mode": "stage1",
            })
    return out


def run_pass(model: KeywordSpotter, keywords: list[Keyword], lexicon: Lexicon,
             ccfg: CascadeConfig, entries: list[ManifestEntry], features: dict,
             verify_full_too: bool = False) -> tuple[list[dict], list[dict]]:
    """Stream every utterance; returns (stage1 event records, detection records).

    Detection records carry the configured mode's score in "stage2" and,
    when `verify_full_too`, the full-context score in "stage2_full".
    """
    event_records: list[dict] = []
    detection_records: list[dict] = []
    step = ccfg.chunk_size * model.encoder.subsample.subsampling

    def handle(state, entry, dets):
        for det in dets:
            rec = det.as_record(entry.utt_id, keywords[det.candidate.keyword_id].text)
            if verify_full_too:
                full = state.verify(det.candidate, "full")
                rec["stage2_full"] = full.stage2_score
            detection_records.append(rec)

    for entry in entries:
        feats = features[entry.utt_id]
        state = StreamState(model, keywords, lexicon, ccfg)
        state.enable_trace()
        for lo in range(0, feats.shape[0], step):
            handle(state, entry, state.process_chunk(feats[lo:lo + step]))
        handle(state, entry, state.flush())
        event_records.extend(_event_records(entry.utt_id, keywords,
                                            stage1_events(state.trace, ccfg.refractory)))
    return event_records, detection_records


def _hours(entries: list[ManifestEntry], features: dict) -> float:
    return sum(features[e.utt_id].shape[0] for e in entries) * 0.01 / 3600.0


@dataclass
class SeedResult:
    seed: int
    macro_f1: dict
    thresholds: dict
    frr_at_budget: dict
    hours: dict
    train_minutes: float
    eval_minutes: float
    silence_candidates: int = 0        # firings on a pure-noise stream at the gate
    positive_recall_at_gate: float = 0.0  # test positives with a candidate at the gate
    full_ge_causal_frac: float = 0.0   # positive candidates where full >= causal
    shuffle_win_frac: float = 0.0      # decoder prefers real over shuffled segments
    pair_win_frac: float = 0.0         # held-out positive/negative score pairs ordered

    def as_dict(self) -> dict:
        return asdict(self)


def _scores_for(records: list[dict], positives: list[ManifestEntry],
                negative_ids: set[str], field_name: str) -> dict[str, KeywordScores]:
    remapped = []
    for rec in records:
        if field_name != "stage2" and field_name not in rec:
            continue
        r = dict(rec)
        r["stage2"] = rec[field_name]
        remapped.append(r)
    return collect_scores(remapped, positives, negative_ids, score_field="stage2")


def run_seed(bench: BenchmarkConfig, seed: int, log=print) -> SeedResult:
    t0 = time.time()
    corpus_spec = CorpusSpec(**{**asdict(bench.corpus), "seed": seed})
    built = build_corpus(corpus_spec)
    lexicon = built.lexicon
    keywords = [Keyword.from_text(text, lexicon, id=i) for i, text in enumerate(built.keywords)]
    train_corpus = Corpus(
        [e.utt_id for e in built.train],
        [e.transcript.split() for e in built.train],
        [built.features[e.utt_id] for e in built.train],
    )

    def make_train_cfg(epochs: int) -> TrainConfig:
        cfg = TrainConfig(**{**asdict(bench.train), "epochs": epochs, "seed": seed})
        return cfg

    baseline = KeywordSpotter(_model_config(bench, lexicon, seed, use_bias=False))
    train_stage(baseline, train_corpus, lexicon, make_train_cfg(bench.stage1_epochs), stage=1)
    log(f"[seed {seed}] baseline stage-1 trained ({(time.time() - t0) / 60:.1f} min)")

    twopass = KeywordSpotter(_model_config(bench, lexicon, seed, use_bias=True))
    train_stage(twopass, train_corpus, lexicon, make_train_cfg(bench.stage1_epochs), stage=1)
    # the bias-only ladder row is the stage-1 system as trained, before the
    # joint stage can move the shared encoder
    stage1_model = KeywordSpotter(_model_config(bench, lexicon, seed, use_bias=True))
    for (_, dst), (_, src) in zip(stage1_model.named_parameters(), twopass.named_parameters()):
        dst.data = src.data.copy()
    train_stage(twopass, train_corpus, lexicon, make_train_cfg(bench.stage2_epochs), stage=2)
    train_minutes = (time.time() - t0) / 60.0
    log(f"[seed {seed}] two-pass trained ({train_minutes:.1f} min total)")

    t1 = time.time()
    dev_pos, dev_neg = built.dev_pos, built.dev_neg
    test_pos, test_neg = built.test_pos, built.test_neg
    dev_neg_ids = {e.utt_id for e in dev_neg}
    test_neg_ids = {e.utt_id for e in test_neg}
    hours = {"dev": _hours(dev_neg, built.features), "test": _hours(test_neg, built.features)}
    feats = built.features
    trace_cfg = CascadeConfig(**{**asdict(bench.cascade), "stage1_threshold": 1e8})

    # baseline: stage-1 events only
    base_dev_ev, _ = run_pass(baseline, keywords, lexicon, trace_cfg, dev_pos + dev_neg, feats)
    base_test_ev, _ = run_pass(baseline, keywords, lexicon, trace_cfg, test_pos + test_neg, feats)
    base_dev = _scores_for(base_dev_ev, dev_pos, dev_neg_ids, "stage1")
    th_base, _ = best_f1_threshold(base_dev)
    base_test = _scores_for(base_test_ev, test_pos, test_neg_ids, "stage1")

    # bias-only system: the stage-1 checkpoint scored on its own traces
    enc_dev_ev, _ = run_pass(stage1_model, keywords, lexicon, trace_cfg, dev_pos + dev_neg, feats)
    enc_test_ev, _ = run_pass(stage1_model, keywords, lexicon, trace_cfg, test_pos + test_neg, feats)
    enc_dev = _scores_for(enc_dev_ev, dev_pos, dev_neg_ids, "stage1")
    th_enc, _ = best_f1_threshold(enc_dev)
    enc_test = _scores_for(enc_test_ev, test_pos, test_neg_ids, "stage1")

    # two-pass model: its own dev trace sets the stage-1 gate
    tp_dev_ev, _ = run_pass(twopass, keywords, lexicon, trace_cfg, dev_pos + dev_neg, feats)
    tp_dev = _scores_for(tp_dev_ev, dev_pos, dev_neg_ids, "stage1")
    th_tp, _ = best_f1_threshold(tp_dev)
    gate = th_tp - bench.stage1_relax

    verified_cfg = CascadeConfig(**{**asdict(bench.cascade), "stage1_threshold": gate})
    dev_ev2, dev_det = run_pass(twopass, keywords, lexicon, verified_cfg,
                                dev_pos + dev_neg, feats, verify_full_too=True)
    test_ev2, test_det = run_pass(twopass, keywords, lexicon, verified_cfg,
                                  test_pos + test_neg, feats, verify_full_too=True)
    del test_ev2, dev_ev2

    causal_dev = _scores_for(dev_det, dev_pos, dev_neg_ids, "stage2")
    full_dev = _scores_for(dev_det, dev_pos, dev_neg_ids, "stage2_full")
    th_causal, _ = best_f1_threshold(causal_dev)
    th_full, _ = best_f1_threshold(full_dev)
    causal_test = _scores_for(test_det, test_pos, test_neg_ids, "stage2")
    full_test = _scores_for(test_det, test_pos, test_neg_ids, "stage2_full")

    macro = {
        "baseline": f1_at(base_test, th_base).macro,
        "encoder": f1_at(enc_test, th_enc).macro,
        "causal": f1_at(causal_test, th_causal).macro,
        "full": f1_at(full_test, th_full).macro,
    }
    frr = {}
    for name, scores in (("encoder", enc_test), ("causal", causal_test), ("full", full_test),
                         ("baseline", base_test)):
        curve = roc(scores, hours["test"])
        grid_point = min(curve.grid, key=lambda g: abs(g - bench.fa_budget))
        frr[name] = dict(curve.overall)[grid_point]

    # trained-model behavior checks --------------------------------------
    rng = np.random.default_rng(seed + 17)
    silence = synth_silence(corpus_spec.synth_spec(), 12000, rng)
    sil_state = StreamState(twopass, keywords, lexicon, verified_cfg)
    step = verified_cfg.chunk_size * twopass.encoder.subsample.subsampling
    silence_candidates = 0
    for lo in range(0, silence.shape[0], step):
        silence_candidates += len(sil_state.process_chunk(silence[lo:lo + step]))

    pos_by_stream: dict[str, dict] = {}
    for rec in test_det:
        entryq = pos_by_stream.setdefault(rec["stream"], {})
        entryq.setdefault(rec["keyword"], []).append(rec)
    hits = 0
    full_ge = [0, 0]
    for entry in test_pos:
        recs = pos_by_stream.get(entry.utt_id, {}).get(entry.keyword, [])
        if recs:
            hits += 1
            for r in recs:
                full_ge[0] += 1
                if r["stage2_full"] >= r["stage2"] - 1e-12:
                    full_ge[1] += 1
    positive_recall_at_gate = hits / max(1, len(test_pos))
    full_ge_causal_frac = full_ge[1] / max(1, full_ge[0])

    shuffle_wins = [0, 0]
    for entry in test_pos:
        recs = pos_by_stream.get(entry.utt_id, {}).get(entry.keyword, [])
        if not recs or shuffle_wins[0] >= 100:
            continue
        rec = recs[0]
        kw = keywords[rec["keyword_id"]]
        f = feats[entry.utt_id]
        with no_grad():
            h = twopass.encode(f, chunk_size=None)
            lo = min(rec["start"], h.shape[0] - 1)
            hi = min(rec["end"], h.shape[0] - 1)
            rows = h.data[lo:hi + 1]
            real = twopass.decoder_score(Tensor(rows), kw.phones,
                                         sos_eos=lexicon.sos_eos, eok=lexicon.eok)
            shuffled = rows[rng.permutation(rows.shape[0])]
            shuf = twopass.decoder_score(Tensor(shuffled), kw.phones,
                                         sos_eos=lexicon.sos_eos, eok=lexicon.eok)
        shuffle_wins[0] += 1
        if real > shuf:
            shuffle_wins[1] += 1
    shuffle_win_frac = shuffle_wins[1] / max(1, shuffle_wins[0])

    pos_scores = [s for ks in causal_test.values() for s in ks.positives if np.isfinite(s)]
    neg_scores = [s for ks in causal_test.values() for s in ks.negatives]
    pair_wins = [0, 0]
    if pos_scores and neg_scores:
        for _ in range(200):
            a = pos_scores[int(rng.integers(0, len(pos_scores)))]
            b = neg_scores[int(rng.integers(0, len(neg_scores)))]
            pair_wins[0] += 1
            if a > b:
                pair_wins[1] += 1
    pair_win_frac = pair_wins[1] / max(1, pair_wins[0])

    eval_minutes = (time.time() - t1) / 60.0
    log(f"[seed {seed}] macro-F1 {macro} | FRR@{bench.fa_budget}/h {frr} "
        f"({eval_minutes:.1f} min eval)")
    return SeedResult(
        seed=seed,
        macro_f1=macro,
        thresholds={"baseline": th_base, "encoder": th_enc, "stage1_gate": gate,
                    "causal": th_causal, "full": th_full},
        frr_at_budget=frr,
        hours=hours,
        train_minutes=train_minutes,
        eval_minutes=eval_minutes,
        silence_candidates=silence_candidates,
        positive_recall_at_gate=positive_recall_at_gate,
        full_ge_causal_frac=full_ge_causal_frac,
        shuffle_win_frac=shuffle_win_frac,
        pair_win_frac=pair_win_frac,
    )
