"""Two-pass streaming detection: chunked first-stage search, spike-based
clipping, and decoder verification in causal or full-context mode.

One stream owns one state machine. The encoder advances chunk by chunk
with its cache; posteriorgram, encoder-output and raw-feature rings hold
the last `window` encoder frames of history. Each incoming chunk triggers
one first-stage search per enrolled keyword over the ring; candidates
above the first threshold are clipped around the end-of-keyword peak and
re-scored by the decoder, either against the stored streaming encoder
rows (causal) or against a full-context re-encoding of the segment's
feature frames (full).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field

import numpy as np

from .nn import no_grad
from .nn.tensor import Tensor
from .ctc import KeywordSearcher, Segment, estimate_segment
from .keywords import Keyword, Lexicon
from .model import KeywordSpotter


class StreamClosedError(RuntimeError):
    pass


class SegmentEvictedError(RuntimeError):
    pass


@dataclass
class CascadeConfig:
    stage1_threshold: float = -2.0   # per-frame path log prob
    stage2_threshold: float = -2.0   # per-token decoder log prob
    decoder_mode: str = "causal"     # "causal" | "full"
    chunk_size: int = 8              # encoder frames per step
    spike_threshold: float = 0.5
    window: int = 100                # ring size in encoder frames
    refractory: int = 25             # per-keyword suppression, encoder frames
    segment_pad: int = 2
    verify_delay_chunks: int = 1     # let the end-marker peak land before clipping
    att_context: int | None = None   # None -> window

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if not (np.isfinite(self.stage1_threshold) and np.isfinite(self.stage2_threshold)):
            raise ValueError("thresholds must be finite")
        if self.decoder_mode not in ("causal", "full"):
            raise ValueError(f"unknown decoder mode {self.decoder_mode!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CascadeConfig":
        return cls(**json.loads(text))


@dataclass
class Candidate:
    keyword_id: int
    segment: Segment
    stage1_score: float
    trigger_frame: int


@dataclass
class Detection:
    candidate: Candidate
    stage2_score: float
    accepted: bool
    latency_frames: int
    mode: str

    def as_record(self, stream_id: str, keyword_text: str) -> dict:
        return {
            "stream": stream_id,
            "keyword_id": self.candidate.keyword_id,
            "keyword": keyword_text,
            "start": self.candidate.segment.start,
            "end": self.candidate.segment.end,
            "trigger": self.candidate.trigger_frame,
            "stage1": self.candidate.stage1_score,
            "stage2": self.stage2_score,
            "accepted": self.accepted,
            "latency": self.latency_frames,
            "mode": self.mode,
        }


class _Ring:
    """Append-only view of the last `size` rows with absolute indexing."""

    def __init__(self, size: int, dim: int):
        self.size = size
        self.buf = np.zeros((0, dim))
        self.start = 0  # absolute index of buf[0]

    def append(self, rows: np.ndarray) -> None:
        self.buf = np.concatenate([self.buf, rows], axis=0)
        if self.buf.shape[0] > self.size:
            drop = self.buf.shape[0] - self.size
            self.buf = self.buf[drop:]
            self.start += drop

    @property
    def end(self) -> int:
        return self.start + self.buf.shape[0]  # exclusive

    def slice(self, lo: int, hi: int) -> np.ndarray:
        """Rows for absolute range [lo, hi]; raises if evicted."""
        if lo < self.start or hi >= self.end:
            raise SegmentEvictedError(f"rows [{lo},{hi}] outside buffered [{self.start},{self.end})")
        return self.buf[lo - self.start: hi + 1 - self.start]


class StreamState:
    """Per-stream detector state; model parameters are shared read-only."""

    def __init__(self, model: KeywordSpotter, keywords: list[Keyword],
                 lexicon: Lexicon, config: CascadeConfig):
        if not keywords:
            raise ValueError("init_stream: no keywords enrolled")
        self.model = model
        self.config = config
        self.lexicon = lexicon
        self.keywords = keywords
        att_context = config.att_context if config.att_context is not None else config.window
        with no_grad():
            for kw in keywords:
                if kw.embedding is None and model.cfg.use_bias:
                    kw.embedding = model.encode_keyword(kw.encoder_input).data
        if model.cfg.use_bias:
            self.bias_keys = Tensor(np.concatenate([kw.embedding for kw in keywords], axis=0))
        else:
            self.bias_keys = None
        self.searcher = KeywordSearcher([kw.phones for kw in keywords], blank=0)
        self.enc_state = model.init_stream_state(att_context)
        dim = model.cfg.model_dim
        sub = model.encoder.subsample.subsampling
        self.post = _Ring(config.window, model.cfg.vocab_size)
        self.h = _Ring(config.window, dim)
        self.feats = _Ring(config.window * sub + model.encoder.subsample.left_context,
                           model.cfg.feat_dim)
        self.refractory_until = {kw.id: -1 for kw in keywords}
        self.pending: list[tuple[int, int, float, int]] = []  # (due, kw_id, score, trigger)
        self.detections: list[Detection] = []
        self.dropped: list[dict] = []
        self.trace: list[tuple[int, int, float]] | None = None
        self.closed = False

    def enable_trace(self) -> None:
        """Record (frame, keyword_id, stage-1 score) for every chunk."""
        self.trace = []

    # ------------------------------------------------------------------
    def process_chunk(self, feat_chunk: np.ndarray) -> list[Detection]:
        """Advance the stream by one feature chunk; returns new detections."""
        if self.closed:
            raise StreamClosedError("stream is closed")
        cfg = self.config
        feat_chunk = np.asarray(feat_chunk, dtype=np.float64)
        with no_grad():
            self.feats.append(feat_chunk)
            new_h = self.model.encode_stream(self.enc_state, feat_chunk)
            if new_h is None:
                return []
            if self.bias_keys is not None:
                biased = self.model.apply_bias(new_h, self.bias_keys)
            else:
                biased = new_h
            logp_new = self.model.posteriors(biased).data
        self.h.append(new_h.data)
        self.post.append(logp_new)
        cur_frame = self.post.end - 1
        results = self.searcher.search(self.post.buf, frame_offset=self.post.start)
        for kw, res in zip(self.keywords, results):
            if res is None:
                continue
            score, _s, _e = res
            if self.trace is not None:
                self.trace.append((cur_frame, kw.id, score))
            if score < cfg.stage1_threshold:
                continue
            if cur_frame <= self.refractory_until[kw.id]:
                continue
            self.refractory_until[kw.id] = cur_frame + cfg.refractory
            due = cur_frame + cfg.verify_delay_chunks * cfg.chunk_size
            self.pending.append((due, kw.id, score, cur_frame))
        return self._drain_pending(cur_frame)

    def _drain_pending(self, cur_frame: int, force: bool = False) -> list[Detection]:
        cfg = self.config
        out: list[Detection] = []
        still_waiting = []
        for due, kw_id, score, trigger in self.pending:
            if not force and due > cur_frame:
                still_waiting.append((due, kw_id, score, trigger))
                continue
            kw = self._keyword_by_id(kw_id)
            seg = estimate_segment(self.post.buf, len(kw.phones), cfg.spike_threshold,
                                   eok=self.lexicon.eok, blank=0)
            lo = max(self.post.start, self.post.start + seg.start - cfg.segment_pad)
            hi = min(cur_frame, self.post.start + seg.end + cfg.segment_pad)
            candidate = Candidate(kw_id, Segment(lo, hi), score, trigger)
            try:
                det = self.verify(candidate, cfg.decoder_mode, verify_frame=cur_frame)
            except SegmentEvictedError as exc:
                self.dropped.append({"keyword_id": kw_id, "trigger": trigger, "reason": str(exc)})
                continue
            out.append(det)
            self.detections.append(det)
        self.pending = still_waiting
        return out

    def flush(self) -> list[Detection]:
        """Verify any candidates still waiting for their delay at stream end."""
        if not self.pending:
            return []
        return self._drain_pending(self.post.end - 1, force=True)

    # ------------------------------------------------------------------
    def verify(self, candidate: Candidate, mode: str, verify_frame: int | None = None) -> Detection:
        """Second-pass score for a candidate against buffered history."""
        kw = self._keyword_by_id(candidate.keyword_id)
        seg = candidate.segment
        with no_grad():
            if mode == "causal":
                h_rows = Tensor(self.h.slice(seg.start, seg.end))
            elif mode == "full":
                sub = self.model.encoder.subsample.subsampling
                ctx = self.model.encoder.subsample.left_context
                f_lo = max(self.feats.start, seg.start * sub - ctx)
                f_hi = min(self.feats.end - 1, seg.end * sub + sub - 1)
                feat_rows = self.feats.slice(f_lo, f_hi)
                h_rows = self.model.encode(feat_rows, chunk_size=None)
            else:
                raise ValueError(f"unknown decoder mode {mode!r}")
            score = self.model.decoder_score(h_rows, kw.phones,
                                             sos_eos=self.lexicon.sos_eos,
                                             eok=self.lexicon.eok)
        at = candidate.trigger_frame if verify_frame is None else verify_frame
        return Detection(
            candidate=candidate,
            stage2_score=score,
            accepted=score >= self.config.stage2_threshold,
            latency_frames=at - seg.end,
            mode=mode,
        )

    def close(self) -> None:
        self.closed = True

    def _keyword_by_id(self, kid: int) -> Keyword:
        for kw in self.keywords:
            if kw.id == kid:
                return kw
        raise KeyError(f"unknown keyword id {kid}")


def init_stream(model: KeywordSpotter, keywords: list[Keyword], lexicon: Lexicon,
                config: CascadeConfig) -> StreamState:
    return StreamState(model, keywords, lexicon, config)


def run_stream(state: StreamState, feats: np.ndarray) -> list[Detection]:
    """Feed a whole utterance through in config-sized chunks, then flush."""
    step = state.config.chunk_size * state.model.encoder.subsample.subsampling
    out = []
    for lo in range(0, feats.shape[0], step):
        out.extend(state.process_chunk(feats[lo:lo + step]))
    out.extend(state.flush())
    return out


def filter_detections(records: list[dict], stage1_threshold: float | None = None,
                      stage2_threshold: float | None = None) -> list[dict]:
    """Apply deployment thresholds to a fixed detection run.

    Raising either threshold can only shrink the returned set.
    """
    out = []
    for rec in records:
        if stage1_threshold is not None and rec["stage1"] < stage1_threshold:
            continue
        if stage2_threshold is not None and rec["stage2"] < stage2_threshold:
            continue
        out.append(rec)
    return out


def write_detection_log(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_detection_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
