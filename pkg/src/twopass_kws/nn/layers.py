"""Neural layers built on the autodiff tensor core.

Covers exactly what the keyword spotter needs: linear maps, embeddings,
layer norm, multi-head attention with masking and clipped relative-position
bias, an LSTM, stride-2 convolutional subsampling, and a simplified
conformer block (feed-forward, self-attention, depthwise temporal
convolution, feed-forward; macaron halves, pre-norm residuals).

All temporal operators are causal: convolutions are left-padded and
attention is restricted by the caller's mask, so chunked streaming
reproduces one-shot outputs exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container with recursive discovery in definition order."""

    def named_parameters(self, prefix: str = ""):
        out = []
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out.append((prefix + name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(prefix + name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.w = _param(xavier_uniform(rng, (in_dim, out_dim), in_dim, out_dim))
        self.b = _param(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator):
        self.table = _param(rng.normal(0.0, 0.5 / math.sqrt(dim), size=(vocab, dim)))

    def __call__(self, ids) -> Tensor:
        return T.gather_rows(self.table, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm_rows(x, self.gamma, self.beta, self.eps)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over matrices (n,dk) x (m,dk) x (m,dv)."""
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise T.ShapeError(f"attention: Q{q.shape} K{k.shape} V{v.shape}")
    scale = 1.0 / math.sqrt(q.shape[1])
    logits = T.mul(T.matmul(q, T.transpose(k)), scale)
    weights = T.masked_softmax_rows(logits, mask)
    return T.matmul(weights, v)


class MultiHeadAttention(Module):
    """Multi-head attention with optional clipped relative-position bias.

    The bias is a learned per-head table over clipped query-key offsets,
    applied only when absolute positions are passed in; cross-attention
    calls omit positions and stay purely content-based.
    """

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, rel_max: int = 0,
                 inner_dim: int | None = None):
        inner = inner_dim or dim
        if inner % n_heads != 0:
            raise T.ShapeError(f"attention dim {inner} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = inner // n_heads
        self.wq = Linear(dim, inner, rng)
        self.wk = Linear(dim, inner, rng)
        self.wv = Linear(dim, inner, rng)
        self.wo = Linear(inner, dim, rng)
        self.rel_max = rel_max
        if rel_max > 0:
            self.rel_bias = _param(np.zeros((n_heads, 2 * rel_max + 1)))

    def __call__(
        self,
        q_src: Tensor,
        kv_src: Tensor,
        mask: np.ndarray | None = None,
        q_pos: np.ndarray | None = None,
        k_pos: np.ndarray | None = None,
    ) -> Tensor:
        n, m = q_src.shape[0], kv_src.shape[0]
        H, dh = self.n_heads, self.head_dim
        q = T.permute(T.reshape(self.wq(q_src), (n, H, dh)), (1, 0, 2))   # (H, n, dh)
        k = T.permute(T.reshape(self.wk(kv_src), (m, H, dh)), (1, 2, 0))  # (H, dh, m)
        v = T.permute(T.reshape(self.wv(kv_src), (m, H, dh)), (1, 0, 2))  # (H, m, dh)
        logits = T.mul(T.bmm(q, k), 1.0 / math.sqrt(dh))
        if self.rel_max > 0 and q_pos is not None and k_pos is not None:
            off = np.asarray(q_pos)[:, None] - np.asarray(k_pos)[None, :]
            rel_idx = np.clip(off, -self.rel_max, self.rel_max) + self.rel_max
            logits = T.add(logits, T.take_per_head(self.rel_bias, rel_idx))
        weights = T.masked_softmax_rows(logits, mask)
        ctx = T.reshape(T.permute(T.bmm(weights, v), (1, 0, 2)), (n, H * dh))
        return self.wo(ctx)


class LSTM(Module):
    """Single-layer LSTM; gate order i, f, g, o."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(hidden)
        self.wx = _param(rng.uniform(-bound, bound, size=(in_dim, 4 * hidden)))
        self.wh = _param(rng.uniform(-bound, bound, size=(hidden, 4 * hidden)))
        self.b = _param(np.zeros(4 * hidden))
        self.hidden = hidden

    def init_state(self) -> tuple[Tensor, Tensor]:
        z = np.zeros((1, self.hidden))
        return Tensor(z), Tensor(z)

    def step(self, x_t: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        if x_t.shape != (1, self.wx.shape[0]):
            raise T.ShapeError(f"lstm step: x {x_t.shape}")
        return self._step_projected(T.add(T.matmul(x_t, self.wx), self.b), state)

    def _step_projected(self, xp_t: Tensor, state: tuple[Tensor, Tensor]):
        h_prev, c_prev = state
        if h_prev.shape != (1, self.hidden):
            raise T.ShapeError(f"lstm step: h {h_prev.shape}")
        gates = T.add(xp_t, T.matmul(h_prev, self.wh))
        H = self.hidden
        i = T.sigmoid(T.cols(gates, 0, H))
        f = T.sigmoid(T.cols(gates, H, 2 * H))
        g = T.tanh(T.cols(gates, 2 * H, 3 * H))
        o = T.sigmoid(T.cols(gates, 3 * H, 4 * H))
        c = T.add(T.mul(f, c_prev), T.mul(i, g))
        h = T.mul(o, T.tanh(c))
        return h, (h, c)

    def __call__(self, xs: Tensor) -> Tensor:
        """Run the full sequence (L, in_dim); returns hidden states (L, hidden)."""
        xp = T.add(T.matmul(xs, self.wx), self.b)  # input projections hoisted
        state = self.init_state()
        outs = []
        for t in range(xs.shape[0]):
            h, state = self._step_projected(T.rows(xp, t, t + 1), state)
            outs.append(h)
        return T.concat(outs, axis=0)


class InputTooShortError(ValueError):
    pass


def _half_len(n: int) -> int:
    """Output length of one causal (left-padded) 3-wide stride-2 conv."""
    return (n - 1) // 2 + 1  # == ceil(n / 2)


class ConvSubsample(Module):
    """Two causal 3x3 stride-2 convolutions followed by a linear projection.

    Time is left-padded only, so output frame u depends on input frames
    [4u-6, 4u] and never on the future. For T input frames the output
    length is ceil(ceil(T/2)/2); e.g. T=98 -> 25 (frozen as a regression
    value in the tests).
    """

    MIN_FRAMES = 7

    def __init__(self, feat_dim: int, channels: int, out_dim: int, rng: np.random.Generator):
        self.w1 = _param(xavier_uniform(rng, (channels, 1, 3, 3), 9, channels * 9))
        self.b1 = _param(np.zeros(channels))
        self.w2 = _param(xavier_uniform(rng, (channels, channels, 3, 3), channels * 9, channels * 9))
        self.b2 = _param(np.zeros(channels))
        self.f2 = _half_len(feat_dim)
        self.f4 = _half_len(self.f2)
        self.out = Linear(channels * self.f4, out_dim, rng)
        self.feat_dim = feat_dim
        self.channels = channels
        self.left_context = 6   # input frames of history one output depends on
        self.subsampling = 4

    def __call__(self, feats: Tensor) -> Tensor:
        if feats.ndim != 2 or feats.shape[1] != self.feat_dim:
            raise T.ShapeError(f"conv_subsample: expected (T,{self.feat_dim}), got {feats.shape}")
        if feats.shape[0] < self.MIN_FRAMES:
            raise InputTooShortError(f"need at least {self.MIN_FRAMES} frames, got {feats.shape[0]}")
        x = T.reshape(feats, (1, feats.shape[0], self.feat_dim))
        c1 = T.relu(T.conv2d_stride2(x, self.w1, self.b1, pad_time_left=2, pad_freq=1))
        c2 = T.relu(T.conv2d_stride2(c1, self.w2, self.b2, pad_time_left=2, pad_freq=1))
        return self.out(T.channels_to_rows(c2))

    def output_len(self, n_frames: int) -> int:
        return _half_len(_half_len(n_frames))

    def init_stream(self) -> "ConvStream":
        return ConvStream(self)


class ConvStream:
    """Incremental subsampling equivalent to the one-shot forward.

    Buffers raw feature frames and emits output frame u once input frame 4u
    has arrived, computing both convolutions in valid mode over explicitly
    reconstructed windows (zero rows stand in for the one-shot padding at
    the very start of the stream). Outputs agree with the one-shot path to
    floating-point accumulation order.
    """

    def __init__(self, conv: ConvSubsample):
        self.conv = conv
        self.buf = np.zeros((0, conv.feat_dim))
        self.buf_start = 0  # absolute input index of buf[0]
        self.next_u = 0

    def push(self, frames: np.ndarray) -> Tensor | None:
        frames = np.asarray(frames)
        if frames.size:
            self.buf = np.concatenate([self.buf, frames], axis=0)
        last_abs = self.buf_start + self.buf.shape[0] - 1
        u_max = last_abs // 4
        if self.buf.shape[0] == 0 or u_max < self.next_u:
            return None
        conv = self.conv
        t_lo = max(0, 2 * self.next_u - 2)
        in_lo = 2 * t_lo - 2                      # may be -2 at stream start
        in_hi = 4 * u_max
        window = np.zeros((in_hi - in_lo + 1, conv.feat_dim))
        src_lo = max(in_lo, 0)
        window[src_lo - in_lo:] = self.buf[src_lo - self.buf_start: in_hi + 1 - self.buf_start]
        x = Tensor(window.reshape(1, window.shape[0], conv.feat_dim))
        c1 = T.relu(T.conv2d_stride2(x, conv.w1, conv.b1, pad_time_left=0, pad_freq=1))
        if t_lo == 0:
            # replicate the one-shot left padding of the second convolution
            zeros = Tensor(np.zeros((conv.channels, 2, conv.f2)))
            c1 = T.concat([zeros, c1], axis=1)
        c2 = T.relu(T.conv2d_stride2(c1, conv.w2, conv.b2, pad_time_left=0, pad_freq=1))
        out = conv.out(T.channels_to_rows(c2))
        self.next_u = u_max + 1
        keep_from = max(4 * self.next_u - 6, 0)
        drop = keep_from - self.buf_start
        if drop > 0:
            self.buf = self.buf[drop:]
            self.buf_start = keep_from
        return out


def chunk_causal_mask(n: int, chunk_size: int | None, att_context: int | None = None) -> np.ndarray | None:
    """Block-causal attention mask: frame i sees chunks <= its own, and at
    most `att_context` frames before its own chunk start. None means full
    (unrestricted) context."""
    if chunk_size is None:
        return None
    idx = np.arange(n)
    ci = idx // chunk_size
    mask = ci[None, :] <= ci[:, None]
    if att_context is not None:
        start = ci * chunk_size
        mask &= idx[None, :] >= (start[:, None] - att_context)
    return mask


@dataclass
class ConformerLayerCache:
    """Streaming state for one conformer block."""

    attn_src: np.ndarray  # post-ffn1 stream rows (history for keys/values)
    attn_pos: np.ndarray  # absolute positions of those rows
    conv_src: np.ndarray  # last kernel-1 rows of the normalized conv input


class ConformerBlock(Module):
    """Simplified conformer: ½ffn -> self-attention -> depthwise conv -> ½ffn."""

    def __init__(self, dim: int, ffn_hidden: int, n_heads: int, rng: np.random.Generator,
                 conv_kernel: int = 3, rel_max: int = 16):
        self.ln1 = LayerNorm(dim)
        self.ffn1_a, self.ffn1_b = Linear(dim, ffn_hidden, rng), Linear(ffn_hidden, dim, rng)
        self.ln2 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, rng, rel_max=rel_max)
        self.ln3 = LayerNorm(dim)
        self.conv_w = _param(xavier_uniform(rng, (conv_kernel, dim), conv_kernel, conv_kernel))
        self.conv_point = Linear(dim, dim, rng)
        self.ln4 = LayerNorm(dim)
        self.ffn2_a, self.ffn2_b = Linear(dim, ffn_hidden, rng), Linear(ffn_hidden, dim, rng)
        self.kernel = conv_kernel
        self.dim = dim

    def _ffn(self, x: Tensor, ln: LayerNorm, a: Linear, b: Linear) -> Tensor:
        return T.add(x, T.mul(b(T.relu(a(ln(x)))), 0.5))

    def _conv_module(self, src_norm: Tensor) -> Tensor:
        """`src_norm` carries kernel-1 history rows in front; returns T rows."""
        return self.conv_point(T.relu(T.dwconv1d_valid(src_norm, self.conv_w)))

    def __call__(self, x: Tensor, mask: np.ndarray | None, pos: np.ndarray) -> Tensor:
        x1 = self._ffn(x, self.ln1, self.ffn1_a, self.ffn1_b)
        normed = self.ln2(x1)
        x2 = T.add(x1, self.attn(normed, normed, mask, pos, pos))
        pad = Tensor(np.zeros((self.kernel - 1, self.dim)))
        x3 = T.add(x2, self._conv_module(T.concat([pad, self.ln3(x2)], axis=0)))
        return self._ffn(x3, self.ln4, self.ffn2_a, self.ffn2_b)

    def init_cache(self) -> ConformerLayerCache:
        return ConformerLayerCache(
            attn_src=np.zeros((0, self.dim)),
            attn_pos=np.zeros(0, dtype=np.int64),
            conv_src=np.zeros((self.kernel - 1, self.dim)),
        )

    def forward_stream(self, x: Tensor, cache: ConformerLayerCache, pos: np.ndarray,
                       att_context: int | None) -> Tensor:
        """Process one chunk with cached history; mutates `cache`."""
        if att_context is not None and cache.attn_src.shape[0] > att_context:
            cache.attn_src = cache.attn_src[-att_context:]
            cache.attn_pos = cache.attn_pos[-att_context:]
        n_hist = cache.attn_src.shape[0]
        x1 = self._ffn(x, self.ln1, self.ffn1_a, self.ffn1_b)
        kv = T.concat([Tensor(cache.attn_src), x1], axis=0) if n_hist else x1
        k_pos = np.concatenate([cache.attn_pos, pos])
        normed_kv = self.ln2(kv)
        q = T.rows(normed_kv, n_hist, kv.shape[0]) if n_hist else normed_kv
        x2 = T.add(x1, self.attn(q, normed_kv, None, pos, k_pos))
        conv_in = T.concat([Tensor(cache.conv_src), self.ln3(x2)], axis=0)
        x3 = T.add(x2, self._conv_module(conv_in))
        out = self._ffn(x3, self.ln4, self.ffn2_a, self.ffn2_b)
        cache.attn_src = kv.data
        cache.attn_pos = k_pos
        if self.kernel > 1:
            cache.conv_src = conv_in.data[-(self.kernel - 1):]
        return out
