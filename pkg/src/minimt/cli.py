"""Command-line pipeline: corpus generation, pretraining, adaptation,
fine-tuning, translation, evaluation, and feature visualization.

Every artifact-producing command writes a run manifest next to its output
recording the config echo, seed, input/output paths, and the exact command
line, so any run can be reproduced from its manifest alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, corpus, evaluation, model, tokenizer, training
from .corpus import BundleSizes, Language
from .model import ModelConfig, Translator
from .training import MetricsLog, TrainConfig, TrainingDivergedError

MODEL_KEYS = ("d_model", "n_heads", "n_enc_layers", "n_dec_layers",
              "d_ff", "max_len", "dropout")


class CliError(RuntimeError):
    pass


def _split_config_text(text: str) -> tuple[str, dict]:
    """Separate ``model.*`` keys from the training-config lines."""
    train_lines = []
    model_overrides: dict = {}
    for raw in text.splitlines():
        line = raw.strip()
        if line.startswith("model."):
            key, _, value = line.partition("=")
            key = key.strip()[6:]
            if key not in MODEL_KEYS:
                raise CliError(f"unknown model config key: model.{key}")
            model_overrides[key] = float(value) if key == "dropout" else int(value)
        else:
            train_lines.append(raw)
    return "\n".join(train_lines), model_overrides


def _load_config(path) -> tuple[TrainConfig, dict, str]:
    if path is None:
        return TrainConfig(), {}, ""
    text = Path(path).read_text(encoding="utf-8")
    train_text, model_overrides = _split_config_text(text)
    return training.parse_train_config(train_text), model_overrides, text


def _vocab_sidecar(ckpt_path) -> Path:
    return Path(str(ckpt_path) + ".vocab.txt")


def _load_model(init_path, vocab_path=None):
    vocab_path = Path(vocab_path) if vocab_path else _vocab_sidecar(init_path)
    if not vocab_path.exists():
        raise CliError(f"vocabulary file not found: {vocab_path}")
    vocab = tokenizer.Vocabulary.load(vocab_path)
    params, _ = model.load_checkpoint(init_path, expected_vocab_hash=vocab.content_hash())
    return params, vocab


def _write_manifest(out_stem: Path, payload: dict, created: list) -> None:
    path = Path(str(out_stem) + ".manifest.json")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    created.append(path)


def _check_max_len(bundle, vocab, max_len: int) -> None:
    longest = max(len(tokenizer.encode(line, Language.SRC, vocab).ids)
                  for line in bundle.training_lines())
    if max_len < longest + 2:
        raise CliError(
            f"model max_len {max_len} is too small for corpus lines "
            f"(longest encoded line is {longest} tokens)"
        )


def _save_model_artifacts(params, vocab, out, created: list) -> None:
    vocab_path = _vocab_sidecar(out)
    vocab.save(vocab_path)
    created.append(vocab_path)
    model.save_checkpoint(params, out, vocab.content_hash())
    created.append(Path(out))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args, argv, created) -> int:
    sizes_dict = BundleSizes().to_dict()
    if args.sizes:
        for item in args.sizes.split(","):
            key, _, value = item.partition("=")
            if key not in sizes_dict:
                raise CliError(f"unknown size key: {key!r}")
            sizes_dict[key] = int(value)
    sizes = BundleSizes.from_dict(sizes_dict)
    spec = corpus.default_cipher(reorder_rule=args.reorder)
    bundle = corpus.generate_bundle(args.seed, sizes, spec)
    manifest_path = corpus.save_bundle(bundle, args.out, spec, args.seed, sizes)
    created.extend(Path(args.out) / name for name in corpus._FILES.values())
    created.append(manifest_path)
    _write_manifest(Path(args.out) / "run", {
        "command": argv,
        "seed": args.seed,
        "sizes": sizes.to_dict(),
        "bundle_manifest": str(manifest_path),
        "config_echo": "",
    }, created)
    print(f"wrote corpus bundle to {args.out}")
    return 0


def cmd_pretrain(args, argv, created) -> int:
    cfg, model_overrides, config_echo = _load_config(args.config)
    bundle, _, bundle_manifest = corpus.load_bundle(args.corpus)
    vocab = tokenizer.build_vocab(bundle.training_lines())
    mcfg = ModelConfig(vocab_size=len(vocab), **model_overrides)
    _check_max_len(bundle, vocab, mcfg.max_len)
    metrics_path = Path(args.metrics or (str(args.out) + ".metrics.jsonl"))
    log = MetricsLog(metrics_path)
    created.append(metrics_path)
    try:
        params = training.pretrain_supervised(bundle.pretrain_parallel, vocab, mcfg, cfg, log)
    finally:
        log.close()
    _save_model_artifacts(params, vocab, args.out, created)
    _write_manifest(Path(args.out), {
        "command": argv,
        "seed": cfg.seed,
        "config_echo": config_echo,
        "corpus": str(args.corpus),
        "bundle_manifest": str(Path(args.corpus) / corpus.MANIFEST_NAME),
        "checkpoint": str(args.out),
        "vocabulary": str(_vocab_sidecar(args.out)),
        "metrics_log": str(metrics_path),
    }, created)
    print(f"wrote pretrained checkpoint to {args.out}")
    return 0


def cmd_adapt(args, argv, created) -> int:
    cfg, _, config_echo = _load_config(args.config)
    if args.objectives is not None:
        cfg = training.TrainConfig(**{**cfg.__dict__,
                                      "objectives": tuple(x for x in args.objectives.split(",") if x)})
    if args.noise is not None:
        cfg = training.TrainConfig(**{**cfg.__dict__,
                                      "noise": tuple(x for x in args.noise.split(",") if x)})
    bundle, spec, _ = corpus.load_bundle(args.corpus)
    params, vocab = _load_model(args.init, args.vocab)
    metrics_path = Path(args.metrics or (str(args.out) + ".metrics.jsonl"))
    log = MetricsLog(metrics_path)
    created.append(metrics_path)
    try:
        if args.one_time_backtranslation:
            adapted = training.one_time_backtranslate_train(
                params, bundle.mono_src, vocab, cfg, log)
        else:
            adapted, _ = training.train_adapt(params, bundle, vocab, cfg, spec, log)
    except TrainingDivergedError as err:
        if err.report is not None:
            for rec in err.report.to_dicts():
                log.write({"phase": "adapt-aborted", **rec})
        raise
    finally:
        log.close()
    _save_model_artifacts(adapted, vocab, args.out, created)
    _write_manifest(Path(args.out), {
        "command": argv,
        "seed": cfg.seed,
        "config_echo": config_echo,
        "corpus": str(args.corpus),
        "init_checkpoint": str(args.init),
        "checkpoint": str(args.out),
        "vocabulary": str(_vocab_sidecar(args.out)),
        "metrics_log": str(metrics_path),
        "objectives": list(cfg.objectives),
        "one_time_backtranslation": bool(args.one_time_backtranslation),
    }, created)
    print(f"wrote adapted checkpoint to {args.out}")
    return 0


def cmd_finetune(args, argv, created) -> int:
    cfg, _, config_echo = _load_config(args.config)
    params, vocab = _load_model(args.init, args.vocab)
    pairs = corpus._split_pairs(corpus._read_lines(Path(args.pairs)), Path(args.pairs))
    metrics_path = Path(args.metrics or (str(args.out) + ".metrics.jsonl"))
    log = MetricsLog(metrics_path)
    created.append(metrics_path)
    try:
        tuned = training.finetune(params, pairs, vocab, cfg, log)
    finally:
        log.close()
    _save_model_artifacts(tuned, vocab, args.out, created)
    _write_manifest(Path(args.out), {
        "command": argv,
        "seed": cfg.seed,
        "config_echo": config_echo,
        "pairs": str(args.pairs),
        "init_checkpoint": str(args.init),
        "checkpoint": str(args.out),
        "vocabulary": str(_vocab_sidecar(args.out)),
        "metrics_log": str(metrics_path),
    }, created)
    print(f"wrote fine-tuned checkpoint to {args.out}")
    return 0


def cmd_translate(args, argv, created) -> int:
    params, vocab = _load_model(args.init, args.vocab)
    translator = Translator(params, vocab)
    to_lang = Language.SRC if args.lang_to == "src" else Language.TGT
    lines = [line.rstrip("\n") for line in sys.stdin]
    for out_line in translator.translate_batch(lines, to_lang, args.beam):
        print(out_line)
    return 0


def cmd_evaluate(args, argv, created) -> int:
    params, vocab = _load_model(args.init, args.vocab)
    pairs = corpus._split_pairs(corpus._read_lines(Path(args.test)), Path(args.test))
    report = evaluation.evaluate_testset(Translator(params, vocab), pairs, args.beam)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_visualize(args, argv, created) -> int:
    params, vocab = _load_model(args.init, args.vocab)
    src_lines = corpus._read_lines(Path(args.sample_src))
    tgt_lines = corpus._read_lines(Path(args.sample_tgt))
    cloud = analysis.collect_feature_cloud(params, vocab, src_lines, tgt_lines,
                                           max_per_lang=args.max_per_lang, seed=args.seed)
    analysis.project_cloud(cloud)
    overlap = analysis.feature_overlap_report(cloud)
    analysis.emit_scatter(cloud, args.out)
    created.append(Path(args.out))
    record = {"overlap": overlap,
              "points_src": cloud.count(Language.SRC),
              "points_tgt": cloud.count(Language.TGT)}
    print(json.dumps(record, sort_keys=True))
    _write_manifest(Path(args.out), {
        "command": argv,
        "seed": args.seed,
        "config_echo": "",
        "init_checkpoint": str(args.init),
        "scatter": str(args.out),
        "overlap": overlap,
    }, created)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minimt",
                                description="Unsupervised domain adaptation for a toy NMT pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate the synthetic corpus bundle")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--sizes", help="comma list like pretrain=5000,mono_src=20000")
    g.add_argument("--reorder", choices=("identity", "reverse"), default="reverse")
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("pretrain", help="train the out-of-domain baseline model")
    t.add_argument("--corpus", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--metrics")
    t.set_defaults(func=cmd_pretrain)

    a = sub.add_parser("adapt", help="unsupervised domain adaptation")
    a.add_argument("--corpus", required=True)
    a.add_argument("--init", required=True)
    a.add_argument("--config")
    a.add_argument("--vocab")
    a.add_argument("--out", required=True)
    a.add_argument("--metrics")
    a.add_argument("--objectives", help="comma subset of denoise,crosslt,adv")
    a.add_argument("--noise", help="comma subset of mask,dropchar,shuffle")
    a.add_argument("--one-time-backtranslation", action="store_true")
    a.set_defaults(func=cmd_adapt)

    f = sub.add_parser("finetune", help="supervised fine-tuning on labeled pairs")
    f.add_argument("--pairs", required=True)
    f.add_argument("--init", required=True)
    f.add_argument("--config")
    f.add_argument("--vocab")
    f.add_argument("--out", required=True)
    f.add_argument("--metrics")
    f.set_defaults(func=cmd_finetune)

    tr = sub.add_parser("translate", help="translate stdin lines to stdout")
    tr.add_argument("--init", required=True)
    tr.add_argument("--vocab")
    tr.add_argument("--lang-to", choices=("src", "tgt"), required=True)
    tr.add_argument("--beam", type=int, default=3)
    tr.set_defaults(func=cmd_translate)

    e = sub.add_parser("evaluate", help="BLEU on a TSV test set (input TAB reference)")
    e.add_argument("--init", required=True)
    e.add_argument("--vocab")
    e.add_argument("--test", required=True)
    e.add_argument("--beam", type=int, default=3)
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("visualize", help="MDS scatter of encoder features")
    v.add_argument("--init", required=True)
    v.add_argument("--vocab")
    v.add_argument("--sample-src", required=True)
    v.add_argument("--sample-tgt", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--max-per-lang", type=int, default=1000)
    v.set_defaults(func=cmd_visualize)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    created: list[Path] = []
    try:
        return args.func(args, ["minimt"] + argv, created)
    except (CliError, TrainingDivergedError, OSError, ValueError) as err:
        for path in created:
            try:
                Path(path).unlink(missing_ok=True)
            except OSError:
                pass
        print(f"minimt: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
