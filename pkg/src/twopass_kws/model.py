"""The four networks of the spotter and their wiring.

Shared encoder (chunk-causal conformer over subsampled features), keyword
encoder (embedding + LSTM producing one state row per keyword token), bias
module (acoustic-query attention over keyword states, concatenated back
and projected), CTC head (linear + log-softmax posteriors), and the
keyword-conditioned attention decoder (causal self-attention over the
token sequence, cross-attention with keyword tokens as queries over a
clipped span of encoder output).

The bias module is strictly per-frame: each acoustic frame is its own
attention query, so streaming never needs future context there.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field

import numpy as np

from .nn import tensor as T
from .nn.tensor import Tensor
from .nn.layers import (
    ConformerBlock,
    ConformerLayerCache,
    ConvStream,
    ConvSubsample,
    Embedding,
    LayerNorm,
    Linear,
    LSTM,
    Module,
    MultiHeadAttention,
    chunk_causal_mask,
)


@dataclass
class ModelConfig:
    vocab_size: int
    feat_dim: int = 80
    model_dim: int = 64
    n_heads: int = 4
    encoder_layers: int = 4
    ffn_dim: int = 256
    conv_channels: int = 8
    conv_kernel: int = 3
    decoder_layers: int = 2
    decoder_ffn_dim: int = 128
    bias_inner_dim: int | None = None  # defaults to model_dim // 4
    rel_pos_max: int = 16
    chunk_size: int = 8
    use_bias: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")
        if self.vocab_size < 4:
            raise ValueError("vocab needs blank, <sos/eos>, <eok> and one phone")

    @classmethod
    def desk_scale(cls, vocab_size: int, feat_dim: int = 20, **kw) -> "ModelConfig":
        return cls(vocab_size=vocab_size, feat_dim=feat_dim, **kw)

    @classmethod
    def paper_scale(cls, vocab_size: int, **kw) -> "ModelConfig":
        """Sizes used at production scale; too heavy for desk training."""
        defaults = dict(
            feat_dim=80, model_dim=128, n_heads=4, encoder_layers=12,
            ffn_dim=256, decoder_layers=2, decoder_ffn_dim=512, chunk_size=8,
        )
        defaults.update(kw)
        return cls(vocab_size=vocab_size, **defaults)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.subsample = ConvSubsample(cfg.feat_dim, cfg.conv_channels, cfg.model_dim, rng)
        self.blocks = [
            ConformerBlock(cfg.model_dim, cfg.ffn_dim, cfg.n_heads, rng,
                           conv_kernel=cfg.conv_kernel, rel_max=cfg.rel_pos_max)
            for _ in range(cfg.encoder_layers)
        ]
        self.ln_out = LayerNorm(cfg.model_dim)

    def __call__(self, feats, chunk_size: int | None, att_context: int | None = None) -> Tensor:
        x = self.subsample(feats if isinstance(feats, Tensor) else Tensor(feats))
        n = x.shape[0]
        mask = chunk_causal_mask(n, chunk_size, att_context)
        pos = np.arange(n)
        for blk in self.blocks:
            x = blk(x, mask, pos)
        return self.ln_out(x)


@dataclass
class EncoderStreamState:
    conv: ConvStream
    layers: list[ConformerLayerCache]
    att_context: int | None = None
    next_pos: int = 0


class BiasModule(Module):
    """Acoustic-query attention over keyword states, concat, project back.

    The attention runs in a reduced inner width so the always-on cost stays
    a small fraction of the encoder.
    """

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator,
                 inner_dim: int | None = None):
        self.attn = MultiHeadAttention(dim, n_heads, rng, inner_dim=inner_dim or dim)
        self.proj = Linear(2 * dim, dim, rng)

    def __call__(self, h_a: Tensor, h_k: Tensor) -> Tensor:
        attended = self.attn(h_a, h_k)
        return self.proj(T.concat([h_a, attended], axis=1))


class KeywordEncoder(Module):
    """Embedding + single LSTM; one hidden-state row per keyword token."""

    def __init__(self, vocab: int, dim: int, rng: np.random.Generator):
        self.embed = Embedding(vocab, dim, rng)
        self.lstm = LSTM(dim, dim, rng)

    def __call__(self, token_ids) -> Tensor:
        return self.lstm(self.embed(token_ids))


class CTCHead(Module):
    def __init__(self, dim: int, vocab: int, rng: np.random.Generator):
        self.proj = Linear(dim, vocab, rng)

    def __call__(self, h: Tensor) -> Tensor:
        return T.log_softmax_rows(self.proj(h))


class DecoderLayer(Module):
    def __init__(self, dim: int, ffn: int, n_heads: int, rng: np.random.Generator, rel_max: int):
        self.ln_self = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, n_heads, rng, rel_max=rel_max)
        self.ln_cross = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, n_heads, rng)
        self.ln_ffn = LayerNorm(dim)
        self.ffn_a = Linear(dim, ffn, rng)
        self.ffn_b = Linear(ffn, dim, rng)

    def __call__(self, x: Tensor, memory: Tensor, causal: np.ndarray, pos: np.ndarray) -> Tensor:
        normed = self.ln_self(x)
        x = T.add(x, self.self_attn(normed, normed, causal, pos, pos))
        x = T.add(x, self.cross_attn(self.ln_cross(x), memory))
        return T.add(x, self.ffn_b(T.relu(self.ffn_a(self.ln_ffn(x)))))


class AttentionDecoder(Module):
    """Keyword-query decoder: fixed keyword input, cross-attention over a
    clipped span of acoustic representations, per-step distributions."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.embed = Embedding(cfg.vocab_size, cfg.model_dim, rng)
        self.layers = [
            DecoderLayer(cfg.model_dim, cfg.decoder_ffn_dim, cfg.n_heads, rng, cfg.rel_pos_max)
            for _ in range(cfg.decoder_layers)
        ]
        self.ln_out = LayerNorm(cfg.model_dim)
        self.proj = Linear(cfg.model_dim, cfg.vocab_size, rng)

    def __call__(self, memory: Tensor, input_ids) -> Tensor:
        ids = list(input_ids)
        if memory.shape[0] < 1:
            raise ValueError("decoder needs a non-empty acoustic segment")
        n = len(ids)
        x = self.embed(ids)
        causal = np.tril(np.ones((n, n), dtype=bool))
        pos = np.arange(n)
        for layer in self.layers:
            x = layer(x, memory, causal, pos)
        return T.log_softmax_rows(self.proj(self.ln_out(x)))


class KeywordSpotter(Module):
    """Complete two-pass model; `use_bias=False` builds the plain baseline."""

    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        if cfg.use_bias:
            self.keyword_encoder = KeywordEncoder(cfg.vocab_size, cfg.model_dim, rng)
            inner = cfg.bias_inner_dim or max(cfg.n_heads, cfg.model_dim // 4)
            inner = ((inner + cfg.n_heads - 1) // cfg.n_heads) * cfg.n_heads
            self.bias = BiasModule(cfg.model_dim, cfg.n_heads, rng, inner_dim=inner)
        self.ctc_head = CTCHead(cfg.model_dim, cfg.vocab_size, rng)
        self.decoder = AttentionDecoder(cfg, rng)

    # encoding ------------------------------------------------------------
    def encode(self, feats, chunk_size: int | None = None, att_context: int | None = None) -> Tensor:
        return self.encoder(feats, chunk_size, att_context)

    def init_stream_state(self, att_context: int | None) -> EncoderStreamState:
        return EncoderStreamState(
            conv=self.encoder.subsample.init_stream(),
            layers=[blk.init_cache() for blk in self.encoder.blocks],
            att_context=att_context,
        )

    def encode_stream(self, state: EncoderStreamState, feat_chunk: np.ndarray) -> Tensor | None:
        """Push a feature chunk; returns newly finished encoder rows."""
        x = state.conv.push(feat_chunk)
        if x is None:
            return None
        n = x.shape[0]
        pos = np.arange(state.next_pos, state.next_pos + n)
        for blk, cache in zip(self.encoder.blocks, state.layers):
            x = blk.forward_stream(x, cache, pos, state.att_context)
        state.next_pos += n
        return self.encoder.ln_out(x)

    # keyword conditioning --------------------------------------------------
    def encode_keyword(self, encoder_input) -> Tensor:
        if not self.cfg.use_bias:
            raise ValueError("baseline model has no keyword encoder")
        return self.keyword_encoder(encoder_input)

    def apply_bias(self, h_a: Tensor, h_k: Tensor | None) -> Tensor:
        if not self.cfg.use_bias:
            return h_a
        if h_k is None:
            raise ValueError("keyword embedding required when bias is enabled")
        return self.bias(h_a, h_k)

    def posteriors(self, h_biased: Tensor) -> Tensor:
        return self.ctc_head(h_biased)

    # second pass -----------------------------------------------------------
    def decoder_logprobs(self, h_segment: Tensor, decoder_input) -> Tensor:
        ids = list(decoder_input)
        if not ids:
            raise ValueError("empty decoder input")
        return self.decoder(h_segment, ids)

    def decoder_score(self, h_segment: Tensor, keyword_phones, sos_eos: int, eok: int) -> float:
        """Length-normalized log probability of the keyword path (with the
        terminal end-of-keyword token)."""
        phones = list(keyword_phones)
        inp = [sos_eos] + phones
        tgt = phones + [eok]
        logp = self.decoder_logprobs(h_segment, inp)
        steps = np.arange(len(tgt))
        return float(logp.data[steps, tgt].mean())

    # reporting ---------------------------------------------------------------
    def parameter_report(self) -> dict:
        report = {"encoder": self.encoder.num_parameters(), "ctc_head": self.ctc_head.num_parameters(),
                  "decoder": self.decoder.num_parameters()}
        if self.cfg.use_bias:
            report["bias"] = self.bias.num_parameters()
            report["keyword_encoder"] = self.keyword_encoder.num_parameters()
        report["total"] = sum(v for v in report.values())
        return report
