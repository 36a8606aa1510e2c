"""Lexicon, phonemization, and training-time keyword sampling.

Reserved token ids sit at the edges of the table: blank is 0, the shared
start/end symbol and the end-of-keyword marker take the top two slots.
Positive samples pull a contiguous word span out of the transcript and
insert the end-of-keyword marker after it in the CTC target; negatives
combine lexicon words absent from the transcript and train the decoder to
emit the end symbol immediately.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BLANK_ID = 0


class OovError(KeyError):
    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self):
        return f"word not in lexicon: {self.word!r}"


class SamplerError(RuntimeError):
    pass


@dataclass
class Lexicon:
    """Word to phone-id map over real phones 1..n_phones."""

    words: dict[str, list[int]]
    n_phones: int

    def __post_init__(self):
        for w, phones in self.words.items():
            if not phones:
                raise ValueError(f"word {w!r} has no phones")
            for p in phones:
                if not 1 <= p <= self.n_phones:
                    raise ValueError(f"word {w!r}: phone id {p} outside 1..{self.n_phones}")

    @property
    def sos_eos(self) -> int:
        return self.n_phones + 1

    @property
    def eok(self) -> int:
        return self.n_phones + 2

    @property
    def vocab_size(self) -> int:
        return self.n_phones + 3  # blank + phones + <sos/eos> + <eok>

    def to_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for w in sorted(self.words):
                f.write(f"{w}\t{' '.join(str(p) for p in self.words[w])}\n")

    @classmethod
    def from_tsv(cls, path, n_phones: int | None = None) -> "Lexicon":
        words = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                word, phones = line.split("\t")
                words[word] = [int(p) for p in phones.split()]
        if n_phones is None:
            n_phones = max(p for phones in words.values() for p in phones)
        return cls(words, n_phones)


def phonemize(text, lexicon: Lexicon) -> list[int]:
    """Concatenated phone ids for a phrase (string or word list)."""
    words = text.split() if isinstance(text, str) else list(text)
    if not words:
        raise ValueError("empty text cannot be phonemized")
    out = []
    for w in words:
        if w not in lexicon.words:
            raise OovError(w)
        out.extend(lexicon.words[w])
    return out


@dataclass
class Keyword:
    """A customized keyword: text, phones, and (once computed) its embedding."""

    text: str
    phones: list[int]
    eok: int
    id: int = -1
    embedding: np.ndarray | None = None

    def __post_init__(self):
        if not self.phones:
            raise ValueError("keyword has no phones")
        if BLANK_ID in self.phones:
            raise ValueError("keyword phones contain blank")

    @property
    def encoder_input(self) -> list[int]:
        return self.phones + [self.eok]

    @classmethod
    def from_text(cls, text: str, lexicon: Lexicon, id: int = -1) -> "Keyword":
        return cls(text=text, phones=phonemize(text, lexicon), eok=lexicon.eok, id=id)


@dataclass
class TrainingSample:
    transcript_phones: list[int]
    keyword: Keyword
    polarity: str  # "positive" | "negative"
    ctc_target: list[int]
    decoder_input: list[int]
    decoder_target: list[int]
    transcript_words: list[str] = field(default_factory=list)
    features: np.ndarray | None = None


def find_subsequence(seq: list[int], sub: list[int]) -> int:
    """Index of the first contiguous occurrence of `sub` in `seq`, or -1."""
    n, m = len(seq), len(sub)
    for i in range(n - m + 1):
        if seq[i:i + m] == sub:
            return i
    return -1


def build_sample(transcript_words, keyword_words, polarity: str, lexicon: Lexicon) -> TrainingSample:
    """Deterministic sample construction for a chosen keyword."""
    transcript_words = list(transcript_words)
    transcript_phones = phonemize(transcript_words, lexicon)
    kw = Keyword.from_text(" ".join(keyword_words), lexicon)
    pos = find_subsequence(transcript_phones, kw.phones)
    if polarity == "positive":
        if pos < 0:
            raise ValueError("positive sample: keyword phones not in transcript")
        cut = pos + len(kw.phones)
        ctc_target = transcript_phones[:cut] + [lexicon.eok] + transcript_phones[cut:]
        decoder_target = kw.phones + [lexicon.eok]
    elif polarity == "negative":
        if pos >= 0:
            raise ValueError("negative sample: keyword phones occur in transcript")
        ctc_target = list(transcript_phones)
        decoder_target = [lexicon.sos_eos] * (len(kw.phones) + 1)
    else:
        raise ValueError(f"unknown polarity {polarity!r}")
    decoder_input = [lexicon.sos_eos] + kw.phones
    return TrainingSample(
        transcript_phones=transcript_phones,
        keyword=kw,
        polarity=polarity,
        ctc_target=ctc_target,
        decoder_input=decoder_input,
        decoder_target=decoder_target,
        transcript_words=transcript_words,
    )


@dataclass
class SamplerConfig:
    min_words: int = 2
    max_words: int = 4
    max_retries: int = 50


def sample_keyword(
    transcript_words,
    polarity: str,
    lexicon: Lexicon,
    rng: np.random.Generator,
    config: SamplerConfig | None = None,
) -> TrainingSample:
    """Draw a keyword for one utterance and build the full sample.

    Positives take a random contiguous word span of the transcript;
    negatives combine random lexicon words absent from the transcript,
    length-matched to the positive distribution, retried until the phone
    sequence is not a contiguous piece of the transcript.
    """
    cfg = config or SamplerConfig()
    transcript_words = list(transcript_words)
    if not transcript_words:
        raise ValueError("empty transcript")
    if len(transcript_words) < cfg.min_words:
        raise ValueError(f"transcript of {len(transcript_words)} words < min keyword length {cfg.min_words}")
    hi = min(cfg.max_words, len(transcript_words))
    length = int(rng.integers(cfg.min_words, hi + 1))
    if polarity == "positive":
        start = int(rng.integers(0, len(transcript_words) - length + 1))
        return build_sample(transcript_words, transcript_words[start:start + length], "positive", lexicon)
    transcript_phones = phonemize(transcript_words, lexicon)
    present = set(transcript_words)
    pool = [w for w in lexicon.words if w not in present]
    if not pool:
        raise SamplerError("no lexicon words outside the transcript")
    for _ in range(cfg.max_retries):
        kw_words = [pool[int(i)] for i in rng.integers(0, len(pool), size=length)]
        kw_phones = phonemize(kw_words, lexicon)
        if find_subsequence(transcript_phones, kw_phones) < 0:
            return build_sample(transcript_words, kw_words, "negative", lexicon)
    raise SamplerError(f"could not draw a negative keyword in {cfg.max_retries} tries")


def load_keyword_list(path, lexicon: Lexicon) -> list[Keyword]:
    """Inference keyword file: one phrase per line."""
    keywords = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            keywords.append(Keyword.from_text(line, lexicon, id=len(keywords)))
    if not keywords:
        raise ValueError(f"no keywords in {path}")
    return keywords
