"""Command-line surface: synthesize corpora, train, detect, evaluate, inspect.

Every run writes a reproducibility stamp (config hash, checkpoint hash,
seed) next to its outputs. Exit codes: 0 success, 2 usage/config errors,
3 runtime failures (divergence, missing data).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import ctc as ctc_mod
from .cascade import CascadeConfig, init_stream, run_stream, write_detection_log
from .data import (
    CorpusSpec,
    FeatureArchive,
    build_corpus,
    load_corpus_dir,
    read_manifest,
    save_corpus,
    training_corpus,
)
from .evaluate import best_f1_threshold, collect_scores, f1_at, roc, write_f1_csv, write_roc_csv
from .keywords import Keyword, load_keyword_list
from .model import KeywordSpotter, ModelConfig
from .nn.checkpoint import file_sha256, load_checkpoint, restore_into, save_checkpoint
from .train import TrainConfig, TrainingDivergedError, train_stage, write_history_csv


class CliError(Exception):
    pass


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _write_stamp(path, command: str, seed, configs: dict, checkpoint=None) -> None:
    stamp = {
        "command": command,
        "seed": seed,
        "config_hashes": {k: _sha256_text(v) for k, v in configs.items()},
    }
    if checkpoint and Path(checkpoint).exists():
        stamp["checkpoint_sha256"] = file_sha256(checkpoint)
    Path(path).write_text(json.dumps(stamp, indent=2, sort_keys=True), encoding="utf-8")


def _load_model(checkpoint_path) -> tuple[KeywordSpotter, dict]:
    header, arrays = load_checkpoint(checkpoint_path)
    meta = header.get("meta") or {}
    if "model_config" not in meta:
        raise CliError(f"checkpoint {checkpoint_path} carries no model config")
    cfg = ModelConfig(**meta["model_config"])
    model = KeywordSpotter(cfg)
    restore_into(model, arrays)
    return model, header


def cmd_synth(args) -> int:
    spec = CorpusSpec.from_json(Path(args.spec).read_text(encoding="utf-8")) if args.spec else CorpusSpec()
    if args.seed is not None:
        spec.seed = args.seed
    built = build_corpus(spec)
    save_corpus(built, args.out)
    _write_stamp(Path(args.out) / "stamp.json", "synth", spec.seed, {"corpus_spec": spec.to_json()})
    print(f"synth: {len(built.train)} train / {len(built.test_pos)} test-pos utterances "
          f"-> {args.out}")
    return 0


def cmd_train(args) -> int:
    spec, lexicon, _keywords, manifests, archive = load_corpus_dir(args.corpus)
    cfg = TrainConfig.from_json(Path(args.config).read_text(encoding="utf-8")) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.max_steps is not None:
        cfg.max_steps = args.max_steps
    if args.init:
        model, _header = _load_model(args.init)
        mcfg = model.cfg
    else:
        if args.model_config:
            mcfg = ModelConfig.from_json(Path(args.model_config).read_text(encoding="utf-8"))
        else:
            mcfg = ModelConfig.desk_scale(vocab_size=lexicon.vocab_size, feat_dim=spec.feat_dim,
                                          seed=cfg.seed)
        if args.baseline:
            mcfg.use_bias = False
        model = KeywordSpotter(mcfg)
    corpus = training_corpus(manifests["train"], archive)
    code = 0
    try:
        history = train_stage(model, corpus, lexicon, cfg, stage=args.stage)
    except TrainingDivergedError as exc:
        print(f"train: diverged ({exc}); writing last good checkpoint", file=sys.stderr)
        history = []
        code = 3
    save_checkpoint(args.out, model.named_parameters(), seed=cfg.seed,
                    meta={"model_config": asdict(model.cfg), "stage": args.stage})
    if args.log:
        write_history_csv(args.log, history)
    _write_stamp(str(args.out) + ".stamp.json", f"train-stage{args.stage}", cfg.seed,
                 {"train_config": cfg.to_json(), "model_config": model.cfg.to_json()},
                 checkpoint=args.out)
    if history:
        print(f"train: stage {args.stage}, {len(history)} steps, "
              f"final loss {history[-1]['total']:.4f} -> {args.out}")
    else:
        print(f"train: stage {args.stage}, 0 steps -> {args.out}")
    return code


def cmd_detect(args) -> int:
    spec, lexicon, _corpus_keywords, manifests, archive = load_corpus_dir(args.corpus)
    model, _header = _load_model(args.checkpoint)
    keywords = load_keyword_list(args.keywords, lexicon)
    ccfg = CascadeConfig.from_json(Path(args.config).read_text(encoding="utf-8")) if args.config else CascadeConfig()
    if args.mode:
        ccfg.decoder_mode = args.mode
    entries = read_manifest(args.manifest)
    index = archive.load_index()
    records = []
    for entry in entries:
        feats = archive.read(entry.utt_id, index)
        state = init_stream(model, keywords, lexicon, ccfg)
        detections = run_stream(state, feats)
        for det in detections:
            kw = keywords[det.candidate.keyword_id]
            records.append(det.as_record(entry.utt_id, kw.text))
    write_detection_log(args.out, records)
    _write_stamp(str(args.out) + ".stamp.json", "detect", None,
                 {"cascade_config": ccfg.to_json()}, checkpoint=args.checkpoint)
    print(f"detect: {len(records)} detections over {len(entries)} streams -> {args.out}")
    return 0


def _hours_of(entries, index) -> float:
    frames = sum(index[e.utt_id]["frames"] for e in entries)
    return frames * 0.01 / 3600.0  # 10 ms hop


def cmd_eval(args) -> int:
    _spec, _lexicon, _keywords, _manifests, archive = load_corpus_dir(args.corpus)
    index = archive.load_index()
    records = []
    for path in args.detections:
        with open(path, encoding="utf-8") as f:
            records.extend(json.loads(line) for line in f if line.strip())
    positives = read_manifest(args.positive_manifest)
    negatives = read_manifest(args.negative_manifest)
    hours = _hours_of(negatives, index)
    scores = collect_scores(records, positives, {e.utt_id for e in negatives},
                            score_field=args.score_field,
                            require_overlap=args.require_overlap)
    curve = roc(scores, hours)
    if args.threshold is not None:
        th = args.threshold
    else:
        th, _macro = best_f1_threshold(scores)
    report = f1_at(scores, th)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_roc_csv(out / "roc.csv", curve)
    write_f1_csv(out / "f1.csv", report)
    summary = {
        "negative_hours": hours,
        "threshold": th,
        "macro_f1": report.macro,
        "f1_by_length": report.by_length,
        "overall_roc": curve.overall,
        "score_field": args.score_field,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    _write_stamp(out / "stamp.json", "eval", None,
                 {"args": json.dumps(sorted(map(str, args.detections)))})
    print(f"eval: macro-F1 {report.macro:.4f} at threshold {th:.4f}; "
          f"negative hours {hours:.4f} -> {out}")
    return 0


def cmd_inspect(args) -> int:
    spec, lexicon, _keywords, _manifests, archive = load_corpus_dir(args.corpus)
    model, _header = _load_model(args.checkpoint)
    feats = archive.read(args.utt)
    from .nn import no_grad
    with no_grad():
        h = model.encode(feats, chunk_size=args.chunk if args.chunk > 0 else None)
        if model.cfg.use_bias and args.keyword:
            kw = Keyword.from_text(args.keyword, lexicon)
            h_b = model.apply_bias(h, model.encode_keyword(kw.encoder_input))
        else:
            kw = None
            h_b = h
        logp = model.posteriors(h_b).data
    dump = {"utt_id": args.utt, "frames": int(logp.shape[0]),
            "topk": ctc_mod.topk_frames(logp, k=args.topk)}
    if kw is not None:
        seg = ctc_mod.estimate_segment(logp, len(kw.phones), args.spike_threshold, eok=lexicon.eok)
        score, path = ctc_mod.keyword_viterbi(logp, kw.phones)
        dump["keyword"] = {"text": kw.text, "segment": [seg.start, seg.end],
                           "stage1_score": score, "path": path}
    with open(args.out, "w", encoding="utf-8") as f:
        for rec in dump["topk"]:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
        if kw is not None:
            f.write(json.dumps({"keyword": dump["keyword"]}, sort_keys=True) + "\n")
    print(f"inspect: {args.utt} ({dump['frames']} frames) -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twopass-kws",
                                description="streaming two-pass open-vocabulary keyword spotting")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="build a synthetic corpus directory")
    sp.add_argument("--spec", help="corpus spec JSON (defaults used when omitted)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth)

    tp = sub.add_parser("train", help="train stage 1 or 2")
    tp.add_argument("--corpus", required=True)
    tp.add_argument("--stage", type=int, choices=(1, 2), required=True)
    tp.add_argument("--config", help="TrainConfig JSON")
    tp.add_argument("--model-config", help="ModelConfig JSON (fresh models only)")
    tp.add_argument("--init", help="checkpoint to continue from")
    tp.add_argument("--baseline", action="store_true", help="disable the keyword bias path")
    tp.add_argument("--seed", type=int)
    tp.add_argument("--epochs", type=int)
    tp.add_argument("--max-steps", type=int, dest="max_steps")
    tp.add_argument("--log", help="write training history CSV here")
    tp.add_argument("--out", required=True)
    tp.set_defaults(fn=cmd_train)

    dp = sub.add_parser("detect", help="run the cascade over a manifest")
    dp.add_argument("--corpus", required=True)
    dp.add_argument("--manifest", required=True)
    dp.add_argument("--checkpoint", required=True)
    dp.add_argument("--keywords", required=True)
    dp.add_argument("--config", help="CascadeConfig JSON")
    dp.add_argument("--mode", choices=("causal", "full"))
    dp.add_argument("--out", required=True)
    dp.set_defaults(fn=cmd_detect)

    ep = sub.add_parser("eval", help="ROC and F1 from detection logs")
    ep.add_argument("--corpus", required=True)
    ep.add_argument("--detections", nargs="+", required=True)
    ep.add_argument("--positive-manifest", required=True)
    ep.add_argument("--negative-manifest", required=True)
    ep.add_argument("--score-field", default="stage2", choices=("stage1", "stage2"))
    ep.add_argument("--threshold", type=float)
    ep.add_argument("--require-overlap", action="store_true")
    ep.add_argument("--out-dir", required=True)
    ep.set_defaults(fn=cmd_eval)

    ip = sub.add_parser("inspect", help="dump posteriorgram top-k and segment estimates")
    ip.add_argument("--corpus", required=True)
    ip.add_argument("--checkpoint", required=True)
    ip.add_argument("--utt", required=True)
    ip.add_argument("--keyword")
    ip.add_argument("--chunk", type=int, default=0, help="0 = full context")
    ip.add_argument("--topk", type=int, default=5)
    ip.add_argument("--spike-threshold", type=float, default=0.5)
    ip.add_argument("--out", required=True)
    ip.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (CliError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
