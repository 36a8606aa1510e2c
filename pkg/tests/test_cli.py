"""Command-line pipeline: synth -> train -> detect -> eval -> inspect."""

import json
from pathlib import Path

import numpy as np
import pytest

from twopass_kws.cli import main
from twopass_kws.data import CorpusSpec
from twopass_kws.model import KeywordSpotter, ModelConfig
from twopass_kws.nn.checkpoint import load_checkpoint


TINY_CORPUS = CorpusSpec(
    n_phones=10, feat_dim=10, n_words=15, n_train=40, n_test_keywords=3,
    keyword_words_min=1, keyword_words_max=2, pos_test_per_keyword=2,
    pos_dev_per_keyword=2, neg_test_utts=2, neg_dev_utts=1, neg_utt_words=30,
    utt_words_min=3, utt_words_max=5, seed=11,
)

TINY_MODEL = dict(model_dim=12, n_heads=2, encoder_layers=1, ffn_dim=16,
                  conv_channels=2, decoder_layers=1, decoder_ffn_dim=16, rel_pos_max=4)

TINY_TRAIN = dict(epochs=1, batch_size=8, min_keyword_words=1, max_keyword_words=2,
                  use_spec_augment=False, seed=5)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    (root / "corpus_spec.json").write_text(TINY_CORPUS.to_json(), encoding="utf-8")
    assert main(["synth", "--spec", str(root / "corpus_spec.json"), "--out", str(corpus)]) == 0
    spec = CorpusSpec.from_json((corpus / "corpus_spec.json").read_text())
    mcfg = ModelConfig(vocab_size=spec.n_phones + 3, feat_dim=spec.feat_dim,
                       seed=5, **TINY_MODEL)
    (root / "model.json").write_text(mcfg.to_json(), encoding="utf-8")
    (root / "train.json").write_text(json.dumps(TINY_TRAIN), encoding="utf-8")
    return root


class TestSynth:
    def test_corpus_layout(self, workspace):
        corpus = workspace / "corpus"
        for name in ("lexicon.tsv", "keywords.txt", "features.bin", "features.idx.jsonl",
                     "train.jsonl", "dev_pos.jsonl", "dev_neg.jsonl", "test_pos.jsonl",
                     "test_neg.jsonl", "stamp.json"):
            assert (corpus / name).exists(), name

    def test_stamp_has_hashes_and_seed(self, workspace):
        stamp = json.loads((workspace / "corpus" / "stamp.json").read_text())
        assert stamp["seed"] == 11
        assert "corpus_spec" in stamp["config_hashes"]

    def test_synth_reproducible(self, workspace, tmp_path):
        again = tmp_path / "again"
        assert main(["synth", "--spec", str(workspace / "corpus_spec.json"),
                     "--out", str(again)]) == 0
        a = (workspace / "corpus" / "features.bin").read_bytes()
        b = (again / "features.bin").read_bytes()
        assert a == b


class TestTrain:
    def test_zero_steps_checkpoint_equals_initialization(self, workspace):
        corpus = workspace / "corpus"
        out = workspace / "init.ckpt"
        code = main(["train", "--corpus", str(corpus), "--stage", "1",
                     "--config", str(workspace / "train.json"),
                     "--model-config", str(workspace / "model.json"),
                     "--max-steps", "0", "--out", str(out)])
        assert code == 0
        header, arrays = load_checkpoint(out)
        fresh = KeywordSpotter(ModelConfig(**header["meta"]["model_config"]))
        for name, p in fresh.named_parameters():
            assert np.array_equal(arrays[name], p.data), name

    def test_stage1_then_stage2(self, workspace):
        corpus = workspace / "corpus"
        s1 = workspace / "stage1.ckpt"
        s2 = workspace / "stage2.ckpt"
        assert main(["train", "--corpus", str(corpus), "--stage", "1",
                     "--config", str(workspace / "train.json"),
                     "--model-config", str(workspace / "model.json"),
                     "--log", str(workspace / "history1.csv"),
                     "--out", str(s1)]) == 0
        assert main(["train", "--corpus", str(corpus), "--stage", "2",
                     "--config", str(workspace / "train.json"),
                     "--init", str(s1), "--out", str(s2)]) == 0
        assert s2.exists() and (workspace / "history1.csv").exists()
        header, _ = load_checkpoint(s2)
        assert header["meta"]["stage"] == 2

    def test_missing_corpus_is_usage_error(self, workspace):
        assert main(["train", "--corpus", str(workspace / "nope"), "--stage", "1",
                     "--out", str(workspace / "x.ckpt")]) == 2


@pytest.fixture(scope="module")
def detections(workspace):
    corpus = workspace / "corpus"
    ccfg = {"stage1_threshold": -10.0, "stage2_threshold": -10.0, "chunk_size": 2,
            "window": 30, "refractory": 8}
    (workspace / "cascade.json").write_text(json.dumps(ccfg), encoding="utf-8")
    out = workspace / "det_pos.jsonl"
    code = main(["detect", "--corpus", str(corpus),
                 "--manifest", str(corpus / "test_pos.jsonl"),
                 "--checkpoint", str(workspace / "stage2.ckpt"),
                 "--keywords", str(corpus / "keywords.txt"),
                 "--config", str(workspace / "cascade.json"),
                 "--out", str(out)])
    assert code == 0
    out_neg = workspace / "det_neg.jsonl"
    assert main(["detect", "--corpus", str(corpus),
                 "--manifest", str(corpus / "test_neg.jsonl"),
                 "--checkpoint", str(workspace / "stage2.ckpt"),
                 "--keywords", str(corpus / "keywords.txt"),
                 "--config", str(workspace / "cascade.json"),
                 "--out", str(out_neg)]) == 0
    return out, out_neg


class TestDetectEvalInspect:
    def test_detect_deterministic_bytes(self, workspace, detections):
        out, _ = detections
        again = workspace / "det_pos2.jsonl"
        assert main(["detect", "--corpus", str(workspace / "corpus"),
                     "--manifest", str(workspace / "corpus" / "test_pos.jsonl"),
                     "--checkpoint", str(workspace / "stage2.ckpt"),
                     "--keywords", str(workspace / "corpus" / "keywords.txt"),
                     "--config", str(workspace / "cascade.json"),
                     "--out", str(again)]) == 0
        assert out.read_bytes() == again.read_bytes()

    def test_eval_outputs(self, workspace, detections):
        det_pos, det_neg = detections
        corpus = workspace / "corpus"
        out_dir = workspace / "eval"
        code = main(["eval", "--corpus", str(corpus),
                     "--detections", str(det_pos), str(det_neg),
                     "--positive-manifest", str(corpus / "test_pos.jsonl"),
                     "--negative-manifest", str(corpus / "test_neg.jsonl"),
                     "--out-dir", str(out_dir)])
        assert code == 0
        for name in ("roc.csv", "f1.csv", "summary.json", "stamp.json"):
            assert (out_dir / name).exists(), name
        summary = json.loads((out_dir / "summary.json").read_text())
        assert 0.0 <= summary["macro_f1"] <= 1.0
        assert summary["negative_hours"] > 0

    def test_inspect_dump(self, workspace, detections):
        corpus = workspace / "corpus"
        keywords = (corpus / "keywords.txt").read_text().splitlines()
        utt = json.loads((corpus / "test_pos.jsonl").read_text().splitlines()[0])["utt_id"]
        out = workspace / "dump.jsonl"
        code = main(["inspect", "--corpus", str(corpus),
                     "--checkpoint", str(workspace / "stage2.ckpt"),
                     "--utt", utt, "--keyword", keywords[0], "--out", str(out)])
        assert code == 0
        lines = [json.loads(l) for l in out.read_text().splitlines()]
        assert any("keyword" in rec for rec in lines)
        assert any("topk" in rec for rec in lines)

    def test_unknown_utt_is_error(self, workspace):
        assert main(["inspect", "--corpus", str(workspace / "corpus"),
                     "--checkpoint", str(workspace / "stage2.ckpt"),
                     "--utt", "missing-utt", "--out", str(workspace / "x.jsonl")]) == 2
