"""CTC machinery: training loss, keyword-path search, spikes, segmentation.

The loss runs the forward algorithm in the log domain over the
blank-augmented target and exposes an analytic gradient (state-occupancy
form) to the autodiff core. The keyword search maximizes the log
probability of an alignment of the blank-augmented keyword placed anywhere
inside a window; frames outside the matched span are free, and the score
is the best span log probability divided by the span length, so one
threshold works across keyword lengths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn.tensor import Tensor

NEG_INF = -np.inf


class TargetTooLongError(ValueError):
    pass


class WindowTooShortError(ValueError):
    pass


@dataclass
class Posteriorgram:
    """Per-frame token log probabilities with the special ids they use."""

    logp: np.ndarray  # (T, V)
    blank: int
    eok: int

    def check(self, tol: float = 1e-6) -> None:
        sums = np.exp(self.logp).sum(axis=1)
        if not np.allclose(sums, 1.0, atol=tol):
            raise ValueError("posteriorgram rows do not normalize")


@dataclass
class Segment:
    """Inclusive frame range in encoder-frame indices."""

    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start <= self.end):
            raise ValueError(f"invalid segment [{self.start}, {self.end}]")


def _augment(target: Sequence[int], blank: int) -> np.ndarray:
    z = np.empty(2 * len(target) + 1, dtype=np.int64)
    z[0::2] = blank
    z[1::2] = target
    return z


def min_frames_for_target(target: Sequence[int]) -> int:
    """Shortest alignment: one frame per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss(logp: Tensor, target: Sequence[int], blank: int = 0) -> Tensor:
    """Negative log probability of `target` under the CTC model.

    `logp` is a (T, V) matrix of per-frame log probabilities (rows already
    normalized); gradients flow back through it.
    """
    target = list(target)
    if not target:
        raise ValueError("ctc_loss: empty target")
    Tn, V = logp.shape
    if any(t == blank for t in target) or any(not 0 <= t < V for t in target):
        raise ValueError("ctc_loss: target contains blank or out-of-range id")
    if Tn < min_frames_for_target(target):
        raise TargetTooLongError(f"target needs {min_frames_for_target(target)} frames, have {Tn}")

    lp = logp.data
    z = _augment(target, blank)
    S = z.size
    can_skip = np.zeros(S, dtype=bool)
    can_skip[2:] = (z[2:] != blank) & (z[2:] != z[:-2])

    alpha = np.full((Tn, S), NEG_INF)
    alpha[0, 0] = lp[0, z[0]]
    alpha[0, 1] = lp[0, z[1]]
    for t in range(1, Tn):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate([[NEG_INF], prev[:-1]])
        skip = np.where(can_skip, np.concatenate([[NEG_INF, NEG_INF], prev[:-2]]), NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), skip) + lp[t, z]
    log_p_total = np.logaddexp(alpha[Tn - 1, S - 1], alpha[Tn - 1, S - 2])
    loss_val = -log_p_total

    def backward():
        beta = np.full((Tn, S), NEG_INF)
        beta[Tn - 1, S - 1] = 0.0
        beta[Tn - 1, S - 2] = 0.0
        for t in range(Tn - 2, -1, -1):
            nxt = beta[t + 1] + lp[t + 1, z]
            stay = nxt
            step = np.concatenate([nxt[1:], [NEG_INF]])
            skip_src = np.concatenate([nxt[2:], [NEG_INF, NEG_INF]])
            skip = np.where(np.concatenate([can_skip[2:], [False, False]]), skip_src, NEG_INF)
            beta[t] = np.logaddexp(np.logaddexp(stay, step), skip)
        occ = np.exp(alpha + beta - log_p_total)
        grad = np.zeros_like(lp)
        for s in range(S):
            grad[:, z[s]] -= occ[:, s]
        logp.accum_grad(out.grad * grad)

    out = Tensor._from_op(np.asarray(loss_val, dtype=lp.dtype), (logp,), backward)
    return out


def keyword_viterbi(
    logp: np.ndarray,
    phones: Sequence[int],
    blank: int = 0,
    window: tuple[int, int] | None = None,
) -> tuple[float, list[tuple[int, int]]]:
    """Best placement of the keyword inside `window` (inclusive frame range).

    Returns (score, path): score is the best span log probability divided
    by the span length; path lists (frame, emitted token) over the span,
    including interior blanks. Frames before and after the span are free.
    """
    phones = list(phones)
    if not phones:
        raise ValueError("keyword_viterbi: empty keyword")
    Tn = logp.shape[0]
    lo, hi = (0, Tn - 1) if window is None else window
    if not (0 <= lo <= hi < Tn):
        raise ValueError(f"keyword_viterbi: window [{lo},{hi}] outside 0..{Tn - 1}")
    span_min = min_frames_for_target(phones)
    if hi - lo + 1 < span_min:
        raise WindowTooShortError(f"window of {hi - lo + 1} frames < minimal span {span_min}")

    lp = logp[lo:hi + 1]
    W = lp.shape[0]
    L = len(phones)
    S = 2 * L - 1
    labels = np.empty(S, dtype=np.int64)
    labels[0::2] = phones
    labels[1::2] = blank
    can_skip = np.zeros(S, dtype=bool)
    can_skip[2::2] = np.array(phones[1:]) != np.array(phones[:-1])

    alpha = np.full((W, S), NEG_INF)
    start = np.zeros((W, S), dtype=np.int64)
    parent = np.full((W, S), -1, dtype=np.int64)  # -1 = fresh start
    alpha[0, 0] = lp[0, labels[0]]
    start[0, 0] = 0
    for t in range(1, W):
        prev = alpha[t - 1]
        alpha[t, 0] = lp[t, labels[0]]
        start[t, 0] = t
        parent[t, 0] = -1
        for s in range(1, S):
            best_par, best_val = s, prev[s]
            if prev[s - 1] > best_val:
                best_par, best_val = s - 1, prev[s - 1]
            if can_skip[s] and prev[s - 2] > best_val:
                best_par, best_val = s - 2, prev[s - 2]
            if best_val == NEG_INF:
                continue
            alpha[t, s] = best_val + lp[t, labels[s]]
            start[t, s] = start[t - 1, best_par]
            parent[t, s] = best_par

    ends = alpha[:, S - 1]
    spans = np.arange(W) - start[:, S - 1] + 1
    candidates = [(ends[t], start[t, S - 1], t) for t in range(W) if ends[t] > NEG_INF]
    if not candidates:
        raise WindowTooShortError("no valid keyword alignment in window")
    best_val, best_start, best_t = max(candidates, key=lambda c: (c[0], c[1], -c[2]))
    # backtrack for the diagnostic path
    path = []
    t, s = best_t, S - 1
    while True:
        path.append((lo + t, int(labels[s])))
        par = parent[t, s]
        if par == -1 and s == 0:
            break
        if par == -1:
            raise AssertionError("broken backpointer chain")
        s = int(par)
        t -= 1
    path.reverse()
    span = best_t - best_start + 1
    return float(best_val / span), path


class KeywordSearcher:
    """Batched keyword-path search over a shared posteriorgram window.

    Precomputes the padded state tables for a set of keywords so the
    per-chunk sliding-window search is one vectorized DP over all of them.
    """

    def __init__(self, phone_seqs: Sequence[Sequence[int]], blank: int = 0):
        if not phone_seqs:
            raise ValueError("KeywordSearcher: no keywords")
        self.blank = blank
        self.n = len(phone_seqs)
        self.sizes = np.array([2 * len(p) - 1 for p in phone_seqs])
        self.span_min = np.array([min_frames_for_target(list(p)) for p in phone_seqs])
        S = int(self.sizes.max())
        self.labels = np.zeros((self.n, S), dtype=np.int64)
        self.valid = np.zeros((self.n, S), dtype=bool)
        self.can_skip = np.zeros((self.n, S), dtype=bool)
        for i, phones in enumerate(phone_seqs):
            s = 2 * len(phones) - 1
            self.labels[i, 0:s:2] = phones
            self.labels[i, 1:s:2] = blank
            self.valid[i, :s] = True
            ph = np.asarray(phones)
            self.can_skip[i, 2:s:2] = ph[1:] != ph[:-1]
        self.S = S

    def search(self, logp: np.ndarray, frame_offset: int = 0):
        """Returns per keyword (score, start, end) with absolute frames, or
        None when the window is shorter than the keyword's minimal span."""
        W = logp.shape[0]
        lp_lab = logp[:, self.labels]          # (W, n, S)
        lp_lab = np.where(self.valid, lp_lab, NEG_INF)
        alpha = np.full((self.n, self.S), NEG_INF)
        start = np.zeros((self.n, self.S), dtype=np.int64)
        final = self.sizes - 1
        ar = np.arange(self.n)
        best_val = np.full(self.n, NEG_INF)
        best_start = np.zeros(self.n, dtype=np.int64)
        best_end = np.zeros(self.n, dtype=np.int64)
        for t in range(W):
            stay = alpha
            step = np.concatenate([np.full((self.n, 1), NEG_INF), alpha[:, :-1]], axis=1)
            skip = np.where(
                self.can_skip,
                np.concatenate([np.full((self.n, 2), NEG_INF), alpha[:, :-2]], axis=1),
                NEG_INF,
            )
            best_prev = np.maximum(np.maximum(stay, step), skip)
            src_start = np.where(
                best_prev == stay,
                start,
                np.where(
                    best_prev == step,
                    np.concatenate([np.zeros((self.n, 1), np.int64), start[:, :-1]], axis=1),
                    np.concatenate([np.zeros((self.n, 2), np.int64), start[:, :-2]], axis=1),
                ),
            )
            alpha = best_prev + lp_lab[t]
            start = src_start
            alpha[:, 0] = lp_lab[t, :, 0]       # fresh start always optimal (logp <= 0)
            start[:, 0] = t
            vals = alpha[ar, final]
            starts_f = start[ar, final]
            improved = (vals > best_val) | (
                (vals == best_val) & (vals > NEG_INF) & (starts_f > best_start)
            )
            best_val = np.where(improved, vals, best_val)
            best_start = np.where(improved, starts_f, best_start)
            best_end = np.where(improved, t, best_end)
        out = []
        for i in range(self.n):
            if W < self.span_min[i] or best_val[i] == NEG_INF:
                out.append(None)
                continue
            span = best_end[i] - best_start[i] + 1
            out.append((
                float(best_val[i] / span),
                int(frame_offset + best_start[i]),
                int(frame_offset + best_end[i]),
            ))
        return out


def detect_spikes(
    logp: np.ndarray,
    spike_threshold: float,
    blank: int = 0,
    exclude: Sequence[int] = (),
) -> list[tuple[int, int]]:
    """Frames whose maximum non-blank posterior exceeds the threshold.

    At most one spike per frame (the argmax token), ordered by frame.
    """
    if not 0.0 < spike_threshold < 1.0:
        raise ValueError("spike_threshold must be in (0, 1)")
    p = np.exp(logp).copy()
    p[:, blank] = 0.0
    for e in exclude:
        p[:, e] = 0.0
    best = p.argmax(axis=1)
    vals = p[np.arange(p.shape[0]), best]
    return [(int(t), int(best[t])) for t in np.nonzero(vals > spike_threshold)[0]]


def estimate_segment(
    logp: np.ndarray,
    keyword_len: int,
    spike_threshold: float,
    eok: int,
    blank: int = 0,
    window: tuple[int, int] | None = None,
) -> Segment:
    """Spike-counting segmentation anchored on the end-of-keyword peak.

    The end frame is the window's argmax of the end-of-keyword posterior;
    the start frame walks backward from there collecting non-blank spikes
    (the end marker itself is not counted) until `keyword_len` are found.
    With fewer spikes available the segment falls back to the window start.
    """
    Tn = logp.shape[0]
    lo, hi = (0, Tn - 1) if window is None else window
    if not (0 <= lo <= hi < Tn):
        raise ValueError(f"estimate_segment: window [{lo},{hi}] outside 0..{Tn - 1}")
    sub = logp[lo:hi + 1]
    end_rel = int(sub[:, eok].argmax())
    spikes = detect_spikes(sub, spike_threshold, blank=blank, exclude=(eok,))
    count = 0
    start_rel = 0
    for t, _tok in reversed(spikes):
        if t > end_rel:
            continue
        count += 1
        if count == keyword_len:
            start_rel = t
            break
    return Segment(lo + start_rel, lo + end_rel)


def topk_frames(logp: np.ndarray, k: int = 5) -> list[dict]:
    """Per-frame top-k dump for debugging (JSONL-friendly)."""
    out = []
    for t in range(logp.shape[0]):
        idx = np.argsort(logp[t])[::-1][:k]
        out.append({
            "frame": int(t),
            "topk": [{"token": int(i), "logp": float(logp[t, i])} for i in idx],
        })
    return out
