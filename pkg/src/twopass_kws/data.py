"""Dataset plumbing: feature archives, manifests, synthetic corpus builder.

A corpus directory is self-contained: generator spec, lexicon, keyword
list, one binary feature archive with a JSONL index, and JSONL manifests
for the train/dev/test splits. Everything is reproducible from the spec's
seed.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from .frontend import SynthSpec, synth_utterance
from .keywords import Lexicon, phonemize, find_subsequence
from .train import Corpus


@dataclass
class ManifestEntry:
    utt_id: str
    transcript: str            # space-joined words
    keyword: str | None = None  # label for positive test utterances
    keyword_span: tuple[int, int] | None = None  # feature-frame extent of the keyword

    def to_record(self) -> dict:
        rec = {"utt_id": self.utt_id, "transcript": self.transcript, "keyword": self.keyword}
        if self.keyword_span is not None:
            rec["keyword_span"] = list(self.keyword_span)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "ManifestEntry":
        span = rec.get("keyword_span")
        return cls(rec["utt_id"], rec["transcript"], rec.get("keyword"),
                   tuple(span) if span else None)


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps(e.to_record(), sort_keys=True) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            e = ManifestEntry.from_record(json.loads(line))
            if e.utt_id in seen:
                raise ValueError(f"duplicate utt id {e.utt_id}")
            seen.add(e.utt_id)
            entries.append(e)
    return entries


class FeatureArchive:
    """Per-utterance binary records (id, T, F, little-endian float32 data)
    addressed through a JSONL index."""

    def __init__(self, bin_path, index_path):
        self.bin_path = Path(bin_path)
        self.index_path = Path(index_path)

    def write(self, utterances) -> None:
        """utterances: iterable of (utt_id, features)."""
        with open(self.bin_path, "wb") as fb, open(self.index_path, "w", encoding="utf-8") as fi:
            offset = 0
            for utt_id, feats in utterances:
                feats = np.ascontiguousarray(feats, dtype="<f4")
                ident = utt_id.encode("utf-8")
                rec = struct.pack("<I", len(ident)) + ident + struct.pack("<II", *feats.shape)
                payload = feats.tobytes()
                fb.write(rec)
                fb.write(payload)
                fi.write(json.dumps({
                    "utt_id": utt_id, "offset": offset,
                    "frames": int(feats.shape[0]), "dim": int(feats.shape[1]),
                }) + "\n")
                offset += len(rec) + len(payload)

    def load_index(self) -> dict:
        index = {}
        with open(self.index_path, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    rec = json.loads(line)
                    index[rec["utt_id"]] = rec
        return index

    def read(self, utt_id: str, index: dict | None = None) -> np.ndarray:
        index = index or self.load_index()
        if utt_id not in index:
            raise KeyError(f"utterance {utt_id} not in archive index")
        rec = index[utt_id]
        with open(self.bin_path, "rb") as f:
            f.seek(rec["offset"])
            (id_len,) = struct.unpack("<I", f.read(4))
            ident = f.read(id_len).decode("utf-8")
            T, F = struct.unpack("<II", f.read(8))
            if ident != utt_id or T != rec["frames"] or F != rec["dim"]:
                raise ValueError(f"archive record mismatch for {utt_id}")
            data = np.frombuffer(f.read(T * F * 4), dtype="<f4").reshape(T, F)
        return data.astype(np.float32)

    def read_all(self, utt_ids, index: dict | None = None) -> list[np.ndarray]:
        index = index or self.load_index()
        return [self.read(u, index) for u in utt_ids]


@dataclass
class CorpusSpec:
    """Recipe for a complete synthetic train/dev/test setup."""

    n_phones: int = 20
    feat_dim: int = 20
    dur_min: int = 5
    dur_max: int = 8
    noise_std: float = 0.5
    segment_noise_std: float = 0.0
    n_words: int = 40
    word_len_min: int = 1
    word_len_max: int = 3
    n_train: int = 2000
    utt_words_min: int = 4
    utt_words_max: int = 8
    n_test_keywords: int = 30
    keyword_words_min: int = 2
    keyword_words_max: int = 4
    pad_frames_min: int = 0   # noise-only padding around each utterance
    pad_frames_max: int = 0
    confusers_per_keyword: int = 0   # near-keyword lexicon entries (1 phone mutated)
    neg_confusers_per_utt: int = 0   # confusers spliced into each negative utterance
    pos_test_per_keyword: int = 10
    pos_dev_per_keyword: int = 5
    neg_test_utts: int = 60
    neg_dev_utts: int = 20
    neg_utt_words: int = 200
    seed: int = 0

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(n_phones=self.n_phones, feat_dim=self.feat_dim,
                         dur_min=self.dur_min, dur_max=self.dur_max,
                         noise_std=self.noise_std,
                         segment_noise_std=self.segment_noise_std, seed=self.seed)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CorpusSpec":
        return cls(**json.loads(text))


def _random_lexicon(spec: CorpusSpec, rng: np.random.Generator) -> Lexicon:
    words = {}
    used = set()
    i = 0
    while len(words) < spec.n_words:
        length = int(rng.integers(spec.word_len_min, spec.word_len_max + 1))
        phones = tuple(int(p) for p in rng.integers(1, spec.n_phones + 1, size=length))
        if phones in used and i < spec.n_words * 20:
            i += 1
            continue
        used.add(phones)
        words[f"w{len(words):03d}"] = list(phones)
        i += 1
    return Lexicon(words, spec.n_phones)


def _draw_words(words: list[str], n: int, rng: np.random.Generator) -> list[str]:
    return [words[int(i)] for i in rng.integers(0, len(words), size=n)]


def _contains_any_keyword(phones: list[int], keyword_phones: list[list[int]]) -> bool:
    return any(find_subsequence(phones, kp) >= 0 for kp in keyword_phones)


@dataclass
class BuiltCorpus:
    spec: CorpusSpec
    lexicon: Lexicon
    keywords: list[str]
    train: list[ManifestEntry]
    dev_pos: list[ManifestEntry]
    dev_neg: list[ManifestEntry]
    test_pos: list[ManifestEntry]
    test_neg: list[ManifestEntry]
    features: dict  # utt_id -> np.ndarray


def build_corpus(spec: CorpusSpec) -> BuiltCorpus:
    """Generate the full synthetic setup in memory."""
    rng = np.random.default_rng(spec.seed)
    lexicon = _random_lexicon(spec, rng)
    word_list = sorted(lexicon.words)
    synth = spec.synth_spec()
    protos = synth.prototypes()
    features: dict[str, np.ndarray] = {}

    # test keywords: unseen-as-a-unit word combinations
    keywords: list[str] = []
    kw_phones: list[list[int]] = []
    while len(keywords) < spec.n_test_keywords:
        n = int(rng.integers(spec.keyword_words_min, spec.keyword_words_max + 1))
        text = " ".join(_draw_words(word_list, n, rng))
        if text in keywords:
            continue
        keywords.append(text)
        kw_phones.append(phonemize(text, lexicon))

    # near-keyword confusers: one phone substituted, registered as ordinary
    # lexicon words so negative streams can carry phonetically close content
    confuser_list: list[str] = []
    if spec.confusers_per_keyword > 0:
        extended = dict(lexicon.words)
        for ki, kp in enumerate(kw_phones):
            made = 0
            attempts = 0
            while made < spec.confusers_per_keyword and attempts < 50:
                attempts += 1
                mutated = list(kp)
                pos = int(rng.integers(0, len(mutated)))
                alt = int(rng.integers(1, spec.n_phones + 1))
                if alt == mutated[pos]:
                    continue
                mutated[pos] = alt
                if _contains_any_keyword(mutated, kw_phones):
                    continue
                name = f"x{ki:02d}{made}"
                extended[name] = mutated
                confuser_list.append(name)
                made += 1
        lexicon = Lexicon(extended, spec.n_phones)

    def noise_pad(utt_rng: np.random.Generator) -> np.ndarray:
        n = int(utt_rng.integers(spec.pad_frames_min, spec.pad_frames_max + 1)) \
            if spec.pad_frames_max > 0 else 0
        pad = np.zeros((n, spec.feat_dim), dtype=np.float32)
        if n and synth.noise_std > 0:
            pad += utt_rng.normal(0.0, synth.noise_std, size=pad.shape).astype(np.float32)
        return pad

    def synth_for(utt_id: str, words: list[str]) -> tuple[np.ndarray, list[int]]:
        phones = phonemize(words, lexicon)
        utt_rng = np.random.default_rng([spec.seed, zlib.crc32(utt_id.encode("utf-8"))])
        lead, tail = noise_pad(utt_rng), noise_pad(utt_rng)
        feats = np.concatenate([lead, synth_utterance(synth, phones, utt_rng, protos), tail])
        features[utt_id] = feats
        return feats, phones

    train = []
    for i in range(spec.n_train):
        words = _draw_words(word_list, int(rng.integers(spec.utt_words_min, spec.utt_words_max + 1)), rng)
        utt_id = f"train-{i:05d}"
        synth_for(utt_id, words)
        train.append(ManifestEntry(utt_id, " ".join(words)))

    def positive_entries(tag: str, per_kw: int) -> list[ManifestEntry]:
        entries = []
        for ki, text in enumerate(keywords):
            kw_words = text.split()
            for j in range(per_kw):
                before = _draw_words(word_list, int(rng.integers(1, 3)), rng)
                after = _draw_words(word_list, int(rng.integers(1, 3)), rng)
                words = before + kw_words + after
                utt_id = f"{tag}-k{ki:02d}-{j:03d}"
                phones = phonemize(words, lexicon)
                utt_rng = np.random.default_rng([spec.seed, zlib.crc32(utt_id.encode("utf-8"))])
                lead, tail = noise_pad(utt_rng), noise_pad(utt_rng)
                # synthesize with known per-phone durations to label the span
                durs = utt_rng.integers(spec.dur_min, spec.dur_max + 1, size=len(phones))
                segs = []
                for p, d in zip(phones, durs):
                    seg = np.tile(protos[p], (d, 1))
                    if synth.segment_noise_std > 0:
                        seg = seg + utt_rng.normal(0.0, synth.segment_noise_std, size=spec.feat_dim)
                    segs.append(seg)
                feats = np.concatenate(segs, axis=0)
                if synth.noise_std > 0:
                    feats = feats + utt_rng.normal(0.0, synth.noise_std, size=feats.shape)
                feats = np.concatenate([lead, feats.astype(np.float32), tail])
                features[utt_id] = feats.astype(np.float32)
                n_before = len(phonemize(before, lexicon)) if before else 0
                n_kw = len(phonemize(kw_words, lexicon))
                span_start = lead.shape[0] + int(durs[:n_before].sum())
                span_end = lead.shape[0] + int(durs[:n_before + n_kw].sum()) - 1
                entries.append(ManifestEntry(utt_id, " ".join(words), keyword=text,
                                             keyword_span=(span_start, span_end)))
        return entries

    def keyword_free_words(n_words: int) -> list[str]:
        """Grow a transcript one word at a time, rejecting any extension
        whose phone tail completes a test keyword."""
        max_kw = max(len(p) for p in kw_phones)
        words: list[str] = []
        phones: list[int] = []
        stuck = 0
        while len(words) < n_words:
            for _ in range(30):
                w = word_list[int(rng.integers(0, len(word_list)))]
                cand = phones + lexicon.words[w]
                tail = cand[-(max_kw + len(lexicon.words[w])):]
                if not _contains_any_keyword(tail, kw_phones):
                    words.append(w)
                    phones = cand
                    break
            else:
                if words:
                    words.pop()
                    phones = phonemize(words, lexicon) if words else []
                stuck += 1
                if stuck > n_words * 20:
                    raise RuntimeError("could not synthesize keyword-free negatives")
        return words

    def negative_entries(tag: str, count: int) -> list[ManifestEntry]:
        entries = []
        for made in range(count):
            words = keyword_free_words(spec.neg_utt_words)
            if confuser_list and spec.neg_confusers_per_utt > 0:
                for _ in range(spec.neg_confusers_per_utt):
                    for _try in range(20):
                        cand = list(words)
                        c = confuser_list[int(rng.integers(0, len(confuser_list)))]
                        cand.insert(int(rng.integers(0, len(cand) + 1)), c)
                        if not _contains_any_keyword(phonemize(cand, lexicon), kw_phones):
                            words = cand
                            break
            utt_id = f"{tag}-{made:04d}"
            synth_for(utt_id, words)
            entries.append(ManifestEntry(utt_id, " ".join(words)))
        return entries

    return BuiltCorpus(
        spec=spec,
        lexicon=lexicon,
        keywords=keywords,
        train=train,
        dev_pos=positive_entries("devpos", spec.pos_dev_per_keyword),
        dev_neg=negative_entries("devneg", spec.neg_dev_utts),
        test_pos=positive_entries("testpos", spec.pos_test_per_keyword),
        test_neg=negative_entries("testneg", spec.neg_test_utts),
        features=features,
    )


def save_corpus(built: BuiltCorpus, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "corpus_spec.json").write_text(built.spec.to_json(), encoding="utf-8")
    (out / "synth_spec.json").write_text(built.spec.synth_spec().to_json(), encoding="utf-8")
    built.lexicon.to_tsv(out / "lexicon.tsv")
    (out / "keywords.txt").write_text("\n".join(built.keywords) + "\n", encoding="utf-8")
    archive = FeatureArchive(out / "features.bin", out / "features.idx.jsonl")
    archive.write(sorted(built.features.items()))
    for name, entries in (("train", built.train), ("dev_pos", built.dev_pos),
                          ("dev_neg", built.dev_neg), ("test_pos", built.test_pos),
                          ("test_neg", built.test_neg)):
        write_manifest(out / f"{name}.jsonl", entries)


def load_corpus_dir(corpus_dir):
    """Returns (spec, lexicon, keywords, manifests dict, archive)."""
    d = Path(corpus_dir)
    spec = CorpusSpec.from_json((d / "corpus_spec.json").read_text(encoding="utf-8"))
    lexicon = Lexicon.from_tsv(d / "lexicon.tsv", n_phones=spec.n_phones)
    keywords = [l for l in (d / "keywords.txt").read_text(encoding="utf-8").splitlines() if l.strip()]
    manifests = {}
    for name in ("train", "dev_pos", "dev_neg", "test_pos", "test_neg"):
        path = d / f"{name}.jsonl"
        if path.exists():
            manifests[name] = read_manifest(path)
    archive = FeatureArchive(d / "features.bin", d / "features.idx.jsonl")
    return spec, lexicon, keywords, manifests, archive


def training_corpus(entries: list[ManifestEntry], archive: FeatureArchive) -> Corpus:
    index = archive.load_index()
    return Corpus(
        utt_ids=[e.utt_id for e in entries],
        transcripts=[e.transcript.split() for e in entries],
        features=archive.read_all([e.utt_id for e in entries], index),
    )
