"""Audio frontend: log-mel features, spectral masking, synthetic features.

The WAV path handles PCM16 mono only; the synthetic path builds feature
matrices directly from per-phone prototype vectors and is the primary
source of desk-scale training and evaluation data.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field, asdict

import numpy as np

LOG_FLOOR = 1e-10


class AudioFormatError(ValueError):
    pass


@dataclass
class LogMelConfig:
    sample_rate: int = 16000
    n_mels: int = 80
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    fmin: float = 0.0
    fmax: float | None = None  # defaults to Nyquist
    normalize: bool = False    # per-utterance mean/variance normalization

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_length_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_shift_ms / 1000.0))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters on the mel scale; rows are filters over rfft bins."""
    mels = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz = mel_to_hz(mels)
    bins = np.floor((n_fft + 1) * hz / sample_rate).astype(int)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(1, n_mels + 1):
        left, center, right = bins[m - 1], bins[m], bins[m + 1]
        for k in range(left, center):
            if center > left:
                fb[m - 1, k] = (k - left) / (center - left)
        for k in range(center, right):
            if right > center:
                fb[m - 1, k] = (right - k) / (right - center)
    return fb


def mel_center_frequencies(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def logmel(samples: np.ndarray, config: LogMelConfig) -> np.ndarray:
    """Log mel-filterbank features (T, n_mels) from mono PCM samples."""
    samples = np.asarray(samples, dtype=np.float64)
    if not np.isfinite(samples).all():
        raise AudioFormatError("non-finite samples")
    if config.sample_rate < 8000:
        raise AudioFormatError(f"sample rate {config.sample_rate} < 8 kHz")
    win, hop = config.window_samples, config.hop_samples
    if samples.size < win:
        raise AudioFormatError(f"audio shorter than one window ({samples.size} < {win})")
    n_frames = 1 + (samples.size - win) // hop
    n_fft = 1
    while n_fft < win:
        n_fft *= 2
    window = np.hamming(win)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = samples[idx] * window
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    power = (spec.real ** 2 + spec.imag ** 2)
    fmax = config.fmax if config.fmax is not None else config.sample_rate / 2.0
    fb = mel_filterbank(config.n_mels, n_fft, config.sample_rate, config.fmin, fmax)
    feats = np.log(np.maximum(power @ fb.T, LOG_FLOOR))
    if config.normalize:
        feats = (feats - feats.mean(axis=0)) / np.maximum(feats.std(axis=0), 1e-8)
    return feats.astype(np.float32)


def read_wav(path, expect_rate: int | None = None) -> tuple[np.ndarray, int]:
    """Read a PCM16 mono WAV file; no resampling (rate mismatch is an error)."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise AudioFormatError(f"{path}: expected mono, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise AudioFormatError(f"{path}: expected 16-bit PCM")
        rate = w.getframerate()
        if expect_rate is not None and rate != expect_rate:
            raise AudioFormatError(f"{path}: sample rate {rate} != expected {expect_rate}")
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


@dataclass
class SpecAugmentConfig:
    n_freq_masks: int = 2
    max_freq_width: int = 10
    n_time_masks: int = 2
    max_time_width: int = 50


def spec_augment(feats: np.ndarray, rng: np.random.Generator,
                 config: SpecAugmentConfig | None = None) -> np.ndarray:
    """Zero out up to two frequency bands and two time bands (training only)."""
    cfg = config or SpecAugmentConfig()
    out = np.array(feats, copy=True)
    T, F = out.shape
    for _ in range(cfg.n_freq_masks):
        width = int(rng.integers(0, cfg.max_freq_width + 1))
        width = min(width, F)
        if width:
            f0 = int(rng.integers(0, F - width + 1))
            out[:, f0:f0 + width] = 0.0
    for _ in range(cfg.n_time_masks):
        width = int(rng.integers(0, cfg.max_time_width + 1))
        width = min(width, T)
        if width:
            t0 = int(rng.integers(0, T - width + 1))
            out[t0:t0 + width, :] = 0.0
    return out


@dataclass
class SynthSpec:
    """Synthetic feature generator: one prototype vector per phone.

    Utterances are concatenations of per-phone segments with randomized
    duration plus Gaussian noise; everything is reproducible from the seed.
    `segment_noise_std` adds one random offset vector per phone occurrence
    (correlated across the segment's frames, like channel or speaker
    variability), which frame averaging cannot remove.
    """

    n_phones: int
    feat_dim: int = 20
    dur_min: int = 3
    dur_max: int = 8
    noise_std: float = 0.5
    segment_noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_phones < 1:
            raise ValueError("need at least one phone prototype")
        if not 1 <= self.dur_min <= self.dur_max:
            raise ValueError("bad duration range")

    def prototypes(self) -> np.ndarray:
        """(n_phones + 1, feat_dim); row 0 is unused (blank is not acoustic)."""
        rng = np.random.default_rng(self.seed)
        protos = rng.normal(0.0, 1.0, size=(self.n_phones + 1, self.feat_dim))
        protos[0] = 0.0
        return protos

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        return cls(**json.loads(text))


def synth_utterance(spec: SynthSpec, transcript: list[int], rng: np.random.Generator,
                    protos: np.ndarray | None = None) -> np.ndarray:
    """Features for a phone-id transcript (ids are 1..n_phones)."""
    if not transcript:
        raise ValueError("empty transcript")
    if protos is None:
        protos = spec.prototypes()
    segments = []
    for ph in transcript:
        if not 1 <= ph <= spec.n_phones:
            raise ValueError(f"unknown phone id {ph}")
        dur = int(rng.integers(spec.dur_min, spec.dur_max + 1))
        seg = np.tile(protos[ph], (dur, 1))
        if spec.segment_noise_std > 0:
            seg = seg + rng.normal(0.0, spec.segment_noise_std, size=spec.feat_dim)
        segments.append(seg)
    feats = np.concatenate(segments, axis=0)
    if spec.noise_std > 0:
        feats = feats + rng.normal(0.0, spec.noise_std, size=feats.shape)
    return feats.astype(np.float32)


def synth_silence(spec: SynthSpec, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Keyword-free filler: zero-mean noise at the corpus noise level."""
    base = np.zeros((n_frames, spec.feat_dim))
    if spec.noise_std > 0:
        base = base + rng.normal(0.0, spec.noise_std, size=base.shape)
    return base.astype(np.float32)
