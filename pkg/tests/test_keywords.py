"""Lexicon, phonemization, and the keyword sampler (worked-example schema)."""

import numpy as np
import pytest

from twopass_kws.keywords import (
    Keyword,
    Lexicon,
    OovError,
    SamplerConfig,
    SamplerError,
    build_sample,
    find_subsequence,
    load_keyword_list,
    phonemize,
    sample_keyword,
)


@pytest.fixture
def word_lexicon():
    # one distinct phone per word, convenient for tracing the schema
    return Lexicon({"Call": [1], "you": [2], "Jarvis": [3], "Alex": [4]}, n_phones=4)


@pytest.fixture
def big_lexicon():
    rng = np.random.default_rng(77)
    words = {}
    for i in range(30):
        length = int(rng.integers(1, 4))
        words[f"w{i:02d}"] = [int(p) for p in rng.integers(1, 13, size=length)]
    return Lexicon(words, n_phones=12)


class TestLexicon:
    def test_reserved_ids(self, word_lexicon):
        lex = word_lexicon
        assert lex.sos_eos == 5 and lex.eok == 6 and lex.vocab_size == 7
        assert len({0, lex.sos_eos, lex.eok}) == 3

    def test_tsv_roundtrip(self, tmp_path, big_lexicon):
        path = tmp_path / "lexicon.tsv"
        big_lexicon.to_tsv(path)
        again = Lexicon.from_tsv(path, n_phones=12)
        assert again.words == big_lexicon.words

    def test_out_of_range_phone_rejected(self):
        with pytest.raises(ValueError):
            Lexicon({"bad": [9]}, n_phones=4)

    def test_phone_roundtrip_through_inverse_map(self, big_lexicon):
        # decoding per-word phone ids through an inverted map reproduces them
        for word, phones in big_lexicon.words.items():
            assert phonemize([word], big_lexicon) == phones


class TestPhonemize:
    def test_empty_is_error(self, word_lexicon):
        with pytest.raises(ValueError):
            phonemize("", word_lexicon)

    def test_single_word_verbatim(self, word_lexicon):
        assert phonemize("Jarvis", word_lexicon) == [3]

    def test_two_words_concatenate(self, word_lexicon):
        assert phonemize("Call you", word_lexicon) == [1, 2]

    def test_oov_reports_word(self, word_lexicon):
        with pytest.raises(OovError) as exc:
            phonemize("Call Cortana", word_lexicon)
        assert "Cortana" in str(exc.value)


class TestWorkedExample:
    """The published positive/negative construction for 'Call you Jarvis'."""

    def test_positive_jarvis(self, word_lexicon):
        lex = word_lexicon
        s = build_sample(["Call", "you", "Jarvis"], ["Jarvis"], "positive", lex)
        assert s.keyword.encoder_input == [3, lex.eok]          # Jarvis<eok>
        assert s.ctc_target == [1, 2, 3, lex.eok]               # Call you Jarvis<eok>
        assert s.decoder_input == [lex.sos_eos, 3]              # <sos> Jarvis
        assert s.decoder_target == [3, lex.eok]                 # Jarvis<eok>

    def test_negative_alex(self, word_lexicon):
        lex = word_lexicon
        s = build_sample(["Call", "you", "Jarvis"], ["Alex"], "negative", lex)
        assert s.keyword.encoder_input == [4, lex.eok]          # Alex<eok>
        assert s.ctc_target == [1, 2, 3]                        # Call you Jarvis
        assert s.decoder_input == [lex.sos_eos, 4]              # <sos>Alex
        assert s.decoder_target == [lex.sos_eos, lex.sos_eos]   # <eos><eos>

    def test_eok_inserted_after_first_occurrence(self):
        lex = Lexicon({"a": [1], "b": [2]}, n_phones=2)
        s = build_sample(["a", "b", "a", "b"], ["a", "b"], "positive", lex)
        assert s.ctc_target == [1, 2, lex.eok, 1, 2]

    def test_polarity_consistency_enforced(self, word_lexicon):
        with pytest.raises(ValueError):
            build_sample(["Call", "you"], ["Jarvis"], "positive", word_lexicon)
        with pytest.raises(ValueError):
            build_sample(["Call", "you"], ["you"], "negative", word_lexicon)


class TestSampler:
    def test_invariants_over_seeded_draws(self, big_lexicon):
        lex = big_lexicon
        rng = np.random.default_rng(123)
        word_list = list(lex.words)
        cfg = SamplerConfig(min_words=2, max_words=4)
        for i in range(800):
            n = int(rng.integers(3, 9))
            transcript = [word_list[int(j)] for j in rng.integers(0, len(word_list), size=n)]
            polarity = "positive" if i % 2 == 0 else "negative"
            s = sample_keyword(transcript, polarity, lex, rng, cfg)
            found = find_subsequence(s.transcript_phones, s.keyword.phones)
            assert len(s.decoder_target) == len(s.decoder_input)
            assert s.decoder_input[0] == lex.sos_eos
            assert s.keyword.encoder_input[-1] == lex.eok
            if polarity == "positive":
                assert found >= 0
                assert s.ctc_target.count(lex.eok) == 1
            else:
                assert found < 0
                assert lex.eok not in s.ctc_target
                assert set(s.decoder_target) == {lex.sos_eos}

    def test_sampler_deterministic_per_seed(self, big_lexicon):
        transcript = list(big_lexicon.words)[:6]
        a = sample_keyword(transcript, "positive", big_lexicon, np.random.default_rng(5))
        b = sample_keyword(transcript, "positive", big_lexicon, np.random.default_rng(5))
        assert a.keyword.phones == b.keyword.phones and a.ctc_target == b.ctc_target

    def test_short_transcript_rejected(self, big_lexicon):
        with pytest.raises(ValueError):
            sample_keyword(["w00"], "positive", big_lexicon, np.random.default_rng(0))

    def test_negative_exhaustion(self):
        lex = Lexicon({"a": [1], "b": [2]}, n_phones=2)
        with pytest.raises(SamplerError):
            sample_keyword(["a", "b"], "negative", lex, np.random.default_rng(0))

    def test_negative_length_matches_positive_range(self, big_lexicon):
        rng = np.random.default_rng(9)
        word_list = list(big_lexicon.words)
        cfg = SamplerConfig(min_words=2, max_words=4)
        lengths = set()
        for _ in range(100):
            transcript = [word_list[int(j)] for j in rng.integers(0, 10, size=6)]
            s = sample_keyword(transcript, "negative", big_lexicon, rng, cfg)
            lengths.add(len(s.keyword.text.split()))
        assert lengths <= {2, 3, 4}


class TestKeywordType:
    def test_keyword_requires_phones(self):
        with pytest.raises(ValueError):
            Keyword(text="x", phones=[], eok=6)
        with pytest.raises(ValueError):
            Keyword(text="x", phones=[0, 1], eok=6)

    def test_keyword_list_file(self, tmp_path, word_lexicon):
        path = tmp_path / "keywords.txt"
        path.write_text("Jarvis\nCall you\n\n", encoding="utf-8")
        kws = load_keyword_list(path, word_lexicon)
        assert [k.text for k in kws] == ["Jarvis", "Call you"]
        assert kws[1].phones == [1, 2]
        assert [k.id for k in kws] == [0, 1]
