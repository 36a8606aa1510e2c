"""Two-stage training: CTC-only streaming branch first, then joint
optimization of the whole model with the decoder branch.

Stage one samples a keyword per utterance, conditions the encoder through
the bias module, and minimizes CTC loss on the polarity-dependent target.
Stage two adds the attention decoder: for positives the current
posteriorgram (detached) yields a spike-based segment that clips the
encoder output before cross-attention; negatives attend to the whole
utterance. The total loss is ctc_weight * L_ctc + (1 - ctc_weight) * L_att
and gradients flow through both branches into the shared encoder.

Baseline models (use_bias=False) train on the plain transcript without the
end-of-keyword marker, since without keyword conditioning the marker is
unpredictable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field

import numpy as np

from .nn import tensor as T
from .nn.tensor import Tensor
from . import ctc as ctc_mod
from .ctc import ctc_loss, estimate_segment
from .frontend import SpecAugmentConfig, spec_augment
from .keywords import Lexicon, SamplerConfig, TrainingSample, sample_keyword
from .model import KeywordSpotter


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    ctc_weight: float = 0.3          # loss mix: ctc_weight*L_ctc + (1-ctc_weight)*L_att
    learning_rate: float = 2e-3      # peak rate after warmup
    warmup_steps: int = 200
    batch_size: int = 16
    epochs: int = 5
    p_full_context: float = 0.5
    max_chunk: int = 16
    positive_ratio: float = 0.5
    spike_threshold: float = 0.5
    segment_pad: int = 2
    min_keyword_words: int = 2
    max_keyword_words: int = 4
    use_spec_augment: bool = True
    time_mask_width: int = 50   # production default; shrink for short utterances
    freq_mask_width: int = 10
    grad_clip: float = 5.0
    max_steps: int | None = None  # stop early; 0 leaves the model at init
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight outside [0, 1]")
        if not 0.0 < self.positive_ratio < 1.0:
            raise ValueError("positive_ratio outside (0, 1)")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


def noam_lr(peak: float, warmup: int):
    def lr(step: int) -> float:
        return peak * min(step / max(warmup, 1), (max(warmup, 1) / step) ** 0.5)
    return lr


class Adam:
    """Adam with a step-dependent learning rate and global-norm clipping."""

    def __init__(self, params, lr_fn, beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-9, grad_clip: float | None = None):
        self.params = list(params)
        self.lr_fn = lr_fn
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.grad_clip = grad_clip
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> float:
        self.t += 1
        lr = self.lr_fn(self.t)
        grads = [p.grad for p in self.params]
        if self.grad_clip is not None:
            sq = sum(float((g * g).sum()) for g in grads if g is not None)
            if not np.isfinite(sq):
                raise TrainingDivergedError(f"non-finite gradient at step {self.t}")
            norm = sq ** 0.5
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                grads = [None if g is None else g * scale for g in grads]
        mc = 1.0 / (1 - self.beta1 ** self.t)
        vc = 1.0 / (1 - self.beta2 ** self.t)
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise TrainingDivergedError(f"non-finite gradient at step {self.t}")
            m, v = self.m[i], self.v[i]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p.data = p.data - (lr * mc) * m / (np.sqrt(v * vc) + self.eps)
            if not np.isfinite(p.data).all():
                raise TrainingDivergedError(f"non-finite parameter after step {self.t}")
        return lr


def dynamic_chunk_draw(rng: np.random.Generator, p_full: float, max_chunk: int) -> int | None:
    """None (full context) with probability p_full, else uniform in [1, max_chunk]."""
    if rng.random() < p_full:
        return None
    return int(rng.integers(1, max_chunk + 1))


def cross_entropy_per_token(logp: Tensor, target: list[int]) -> Tensor:
    """Mean negative log probability of the target sequence."""
    return T.neg(T.tmean(T.pick_rows(logp, np.asarray(target))))


def sample_loss(model: KeywordSpotter, sample: TrainingSample, chunk: int | None,
                stage: int, cfg: TrainConfig, eok: int) -> tuple[Tensor, Tensor | None] | None:
    """Forward one sample; returns (ctc_loss, att_loss or None).

    Returns None when the utterance is too short for its CTC target.
    """
    feats = sample.features
    h = model.encode(feats, chunk_size=chunk)
    if model.cfg.use_bias:
        h_k = model.encode_keyword(sample.keyword.encoder_input)
        h_b = model.apply_bias(h, h_k)
        target = sample.ctc_target
    else:
        h_b = h
        target = sample.transcript_phones
    if h.shape[0] < ctc_mod.min_frames_for_target(target):
        return None
    logp = model.posteriors(h_b)
    l_ctc = ctc_loss(logp, target)
    if stage == 1:
        return l_ctc, None
    if sample.polarity == "positive":
        seg = estimate_segment(logp.data, len(sample.keyword.phones),
                               cfg.spike_threshold, eok=eok)
        lo = max(0, seg.start - cfg.segment_pad)
        hi = min(h.shape[0] - 1, seg.end + cfg.segment_pad)
        h_clip = T.rows(h, lo, hi + 1)
    else:
        h_clip = h
    dec_logp = model.decoder_logprobs(h_clip, sample.decoder_input)
    l_att = cross_entropy_per_token(dec_logp, sample.decoder_target)
    return l_ctc, l_att


def batch_loss(model: KeywordSpotter, samples: list[TrainingSample], chunk: int | None,
               stage: int, cfg: TrainConfig, eok: int):
    """Joint loss over a batch; returns (loss, l_ctc, l_att, n_used)."""
    ctc_terms, att_terms = [], []
    for sample in samples:
        result = sample_loss(model, sample, chunk, stage, cfg, eok)
        if result is None:
            continue
        l_ctc, l_att = result
        ctc_terms.append(l_ctc)
        if l_att is not None:
            att_terms.append(l_att)
    if not ctc_terms:
        return None
    l_ctc_mean = T.mul(T.scalar_affine([(1.0, t) for t in ctc_terms]), 1.0 / len(ctc_terms))
    if stage == 1 or not att_terms:
        total = l_ctc_mean
        l_att_val = 0.0
    else:
        l_att_mean = T.mul(T.scalar_affine([(1.0, t) for t in att_terms]), 1.0 / len(att_terms))
        total = T.add(T.mul(l_ctc_mean, cfg.ctc_weight), T.mul(l_att_mean, 1.0 - cfg.ctc_weight))
        l_att_val = l_att_mean.item()
    return total, l_ctc_mean.item(), l_att_val, len(ctc_terms)


@dataclass
class Corpus:
    """Training utterances: parallel lists of ids, word transcripts, features."""

    utt_ids: list[str]
    transcripts: list[list[str]]
    features: list[np.ndarray]

    def __len__(self):
        return len(self.utt_ids)


def make_batch_samples(corpus: Corpus, order: np.ndarray, lexicon: Lexicon,
                       cfg: TrainConfig, rng: np.random.Generator) -> list[TrainingSample]:
    sampler_cfg = SamplerConfig(cfg.min_keyword_words, cfg.max_keyword_words)
    aug_cfg = SpecAugmentConfig(max_freq_width=cfg.freq_mask_width,
                                max_time_width=cfg.time_mask_width)
    samples = []
    for idx in order:
        polarity = "positive" if rng.random() < cfg.positive_ratio else "negative"
        try:
            s = sample_keyword(corpus.transcripts[idx], polarity, lexicon, rng, sampler_cfg)
        except Exception:
            continue
        feats = corpus.features[idx]
        if cfg.use_spec_augment:
            feats = spec_augment(feats, rng, aug_cfg)
        s.features = feats
        samples.append(s)
    return samples


def train_stage(model: KeywordSpotter, corpus: Corpus, lexicon: Lexicon,
                cfg: TrainConfig, stage: int, log=None) -> list[dict]:
    """Run one training stage in place; returns per-step history rows.

    On divergence the parameters are rolled back to the last epoch snapshot
    and TrainingDivergedError is raised.
    """
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(cfg.seed + stage)
    params = model.parameters()
    opt = Adam(params, noam_lr(cfg.learning_rate, cfg.warmup_steps), grad_clip=cfg.grad_clip)
    history: list[dict] = []
    snapshot = [p.data.copy() for p in params]
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(corpus))
            for lo in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    return history
                batch_idx = order[lo:lo + cfg.batch_size]
                samples = make_batch_samples(corpus, batch_idx, lexicon, cfg, rng)
                if not samples:
                    continue
                chunk = dynamic_chunk_draw(rng, cfg.p_full_context, cfg.max_chunk)
                result = batch_loss(model, samples, chunk, stage, cfg, eok=lexicon.eok)
                if result is None:
                    continue
                total, l_ctc, l_att, n_used = result
                if not np.isfinite(total.data):
                    raise TrainingDivergedError(f"non-finite loss at step {step}")
                opt.zero_grad()
                total.backward()
                opt.step()
                step += 1
                row = {"step": step, "epoch": epoch, "l_ctc": l_ctc, "l_att": l_att,
                       "total": float(total.data), "chunk": -1 if chunk is None else chunk,
                       "n_used": n_used}
                history.append(row)
                if log is not None:
                    log(row)
            snapshot = [p.data.copy() for p in params]
    except TrainingDivergedError:
        for p, s in zip(params, snapshot):
            p.data = s
        raise
    return history


def write_history_csv(path, history: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,epoch,l_ctc,l_att,total,chunk\n")
        for row in history:
            f.write(f"{row['step']},{row['epoch']},{row['l_ctc']:.6f},"
                    f"{row['l_att']:.6f},{row['total']:.6f},{row['chunk']}\n")
