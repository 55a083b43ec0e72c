"""Command-line interface.

Exit codes: 0 success, 1 validation error, 2 I/O error. Diagnostics go
to stderr; stdout carries only the requested output.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .corpus import (
    Corpus,
    CorpusError,
    DialogueTurn,
    corpus_statistics,
    extract_spans,
    generate_context_corpus,
    generate_pattern_corpus,
    load_corpus,
    save_corpus,
)
from .embeddings import REGIMES, EmbeddingFormatError, build_vocab, train_sgns, write_vectors
from .tagger import VARIANT_NAMES, CheckpointError, TaggerModel, VariantConfig, load, predict, save
from .training import (
    LabelSetMismatch,
    TrainConfig,
    build_word_table,
    evaluate,
    grid_to_tsv,
    run_grid,
    train,
)

log = logging.getLogger("ctxner")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2

#: config keys that are neither VariantConfig nor TrainConfig fields
EXTRA_KEYS = {"variant", "vectors_path", "min_count", "sgns_window", "sgns_negatives", "sgns_epochs", "sgns_dim"}


class ValidationError(Exception):
    """Bad user input (config, corpus content, flags)."""


# ------------------------------------------------------------------ helpers


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(artifact: str | Path, command: str, config: dict, seed: int,
                   inputs: list[str], artifacts: list[str], started: float,
                   arguments: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "arguments": arguments or {},
        "config": config,
        "seed": seed,
        "inputs": {p: sha256_file(p) for p in inputs},
        "artifacts": {p: sha256_file(p) for p in artifacts},
        "duration_seconds": round(time.perf_counter() - started, 3),
        "ctxner_version": __version__,
    }
    path = Path(str(artifact) + ".manifest.json")
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ValidationError(f"{path}: config must be a flat JSON object")
    for key, val in cfg.items():
        if isinstance(val, (dict, list)):
            raise ValidationError(f"{path}: config key {key!r} must hold a scalar")
    return cfg


def resolve_train_config(file_cfg: dict, flags: dict) -> dict:
    """Merge file values and flag overrides; materialise every default."""
    file_cfg = dict(file_cfg)
    if flags.get("variant") is not None:
        for k in ("use_char", "use_crf", "use_context"):
            file_cfg.pop(k, None)
    merged = {**file_cfg, **{k: v for k, v in flags.items() if v is not None}}
    known = VariantConfig.field_names() | TrainConfig.field_names() | EXTRA_KEYS
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ValidationError(f"unknown config key(s): {', '.join(unknown)}")
    flag_keys = ("use_char", "use_crf", "use_context")
    if any(k in merged for k in flag_keys):
        by_flags = VariantConfig(**{k: bool(merged.get(k, False)) for k in flag_keys}).name
        if "variant" in merged and merged["variant"] != by_flags:
            raise ValidationError(f"variant {merged['variant']!r} contradicts use_* flags ({by_flags})")
        merged["variant"] = by_flags
    variant_name = merged.pop("variant", "BI-LSTM-CHAR-CRF-CE")
    v_kwargs = {k: merged[k] for k in VariantConfig.field_names() if k in merged}
    t_kwargs = {k: merged[k] for k in TrainConfig.field_names() if k in merged}
    try:
        variant = VariantConfig.from_name(variant_name, **{
            k: v for k, v in v_kwargs.items() if k not in flag_keys
        })
        tcfg = TrainConfig(**t_kwargs)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"config: {exc}") from None
    resolved = {"variant": variant.name, **asdict(variant), **asdict(tcfg)}
    resolved["vectors_path"] = merged.get("vectors_path")
    resolved["min_count"] = int(merged.get("min_count", 1))
    resolved["sgns_window"] = int(merged.get("sgns_window", 5))
    resolved["sgns_negatives"] = int(merged.get("sgns_negatives", 5))
    resolved["sgns_epochs"] = int(merged.get("sgns_epochs", 5))
    resolved["sgns_dim"] = int(merged.get("sgns_dim", 300))
    return resolved


def _split_resolved(resolved: dict) -> tuple[VariantConfig, TrainConfig]:
    variant = VariantConfig(**{k: resolved[k] for k in VariantConfig.field_names()})
    tcfg = TrainConfig(**{k: resolved[k] for k in TrainConfig.field_names()})
    return variant, tcfg


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=None, sort_keys=True, ensure_ascii=False) + "\n")


# ----------------------------------------------------------------- commands


def cmd_train(args) -> int:
    started = time.perf_counter()
    flags = {
        "variant": args.variant, "embedding_regime": args.regime, "vectors_path": args.vectors,
        "seed": args.seed, "max_epochs": args.max_epochs, "learning_rate": args.learning_rate,
        "patience": args.patience, "hidden_dim": args.hidden_dim, "layers": args.layers,
    }
    resolved = resolve_train_config(read_config(args.config), flags)
    return _train_from_resolved(resolved, args.corpus, args.out, started)


def _train_from_resolved(resolved: dict, corpus_path: str, out: str, started: float) -> int:
    variant, tcfg = _split_resolved(resolved)
    vectors = resolved.get("vectors_path")
    if variant.embedding_regime in ("G50W", "G300W", "G300C") and not vectors:
        raise ValidationError(f"regime {variant.embedding_regime} requires vectors_path")
    if vectors and not Path(vectors).is_file():
        raise ValidationError(f"pre-trained vector file not found: {vectors}")
    corpus = load_corpus(corpus_path)
    vocab = build_vocab((t for s in corpus.all_sentences() for t in s), resolved["min_count"])
    sgns_opts = {"d": resolved["sgns_dim"], "window": resolved["sgns_window"],
                 "negatives": resolved["sgns_negatives"], "epochs": resolved["sgns_epochs"]}
    table = build_word_table(variant.embedding_regime, vocab, corpus, vectors, variant.word_dim,
                             tcfg.seed, sgns_opts)
    model = TaggerModel.build(variant, corpus.label_set, vocab, table, seed=tcfg.seed)
    model, history = train(model, corpus, tcfg)
    save(model, out)
    hist_path = str(out) + ".history.json"
    atomic_write_text(hist_path, json.dumps(history.to_dict(), indent=2, sort_keys=True) + "\n")
    inputs = [corpus_path] + ([vectors] if vectors else [])
    write_manifest(out, "train", resolved, tcfg.seed, inputs, [str(out), hist_path], started,
                   {"corpus": str(corpus_path), "out": str(out)})
    log.info("wrote %s (best epoch %d, dev macro-F1 %.4f)", out, history.best_epoch, history.best_dev_macro_f1)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load(args.model)
    corpus = load_corpus(args.corpus)
    report = evaluate(model, corpus, args.exclude_empty)
    out = {"model": str(args.model), "corpus": str(args.corpus), "variant": model.variant.name, **report.to_dict()}
    if args.json:
        _emit(out)
        return EXIT_OK
    print(f"variant\t{model.variant.name}")
    print(f"span macro-F1\t{report.macro_f1:.5f}")
    print(f"token macro-F1\t{report.token_macro_f1:.5f}")
    print(f"token accuracy\t{report.token_accuracy:.5f}")
    print("type\tprecision\trecall\tf1\tgold\tpred")
    for ent, s in report.per_type.items():
        flag = " (empty)" if ent in report.empty_types else ""
        print(f"{ent}{flag}\t{s.precision:.5f}\t{s.recall:.5f}\t{s.f1:.5f}\t{s.gold_count}\t{s.pred_count}")
    return EXIT_OK


def _tag_line(model: TaggerModel, line: str, lineno: int) -> dict:
    system, sep, user = line.partition("\t")
    if not sep:
        system, user = "", line
    user_tokens = user.split()
    if not user_tokens:
        raise ValidationError(f"line {lineno}: empty user utterance")
    turn = DialogueTurn("input", lineno, system.split(), user_tokens, ["O"] * len(user_tokens))
    tags = predict(model, turn)
    spans = [
        {"type": ent, "start": s, "end": e, "text": " ".join(user_tokens[s:e + 1])}
        for ent, s, e in extract_spans(tags)
    ]
    return {"line": lineno, "tokens": user_tokens, "tags": tags, "spans": spans}


def cmd_tag(args) -> int:
    model = load(args.model)
    fh = sys.stdin if args.input in (None, "-") else open(args.input, encoding="utf-8")
    status = EXIT_OK
    try:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            try:
                rec = _tag_line(model, line, lineno)
            except ValidationError as exc:
                log.error("%s", exc)
                status = EXIT_VALIDATION
                rec = {"line": lineno, "error": str(exc)}
            if args.json:
                _emit(rec)
            elif "error" in rec:
                print(f"# line {lineno}: error")
            else:
                spans = " ".join(f"[{s['type']}: {s['text']}]" for s in rec["spans"])
                print(" ".join(f"{t}/{g}" for t, g in zip(rec["tokens"], rec["tags"])) + (f"\t{spans}" if spans else ""))
            sys.stdout.flush()
    finally:
        if fh is not sys.stdin:
            fh.close()
    return status


def cmd_sgns(args) -> int:
    started = time.perf_counter()
    corpus = load_corpus(args.corpus)
    sentences = corpus.all_sentences()
    vocab = build_vocab((t for s in sentences for t in s), args.min_count)
    resolved = {"dims": args.dims, "window": args.window, "negatives": args.negatives,
                "epochs": args.epochs, "min_count": args.min_count, "seed": args.seed}
    table = train_sgns(sentences, vocab, d=args.dims, window=args.window, negatives=args.negatives,
                       epochs=args.epochs, seed=args.seed)
    out = Path(args.out)
    fd, tmp = tempfile.mkstemp(prefix=out.name + ".", suffix=".tmp", dir=out.parent)
    os.close(fd)
    try:
        write_vectors(tmp, vocab, table)
        os.replace(tmp, out)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    write_manifest(out, "sgns", resolved, args.seed, [args.corpus], [str(out)], started)
    return EXIT_OK


def cmd_inspect(args) -> int:
    stats = corpus_statistics(load_corpus(args.corpus))
    if args.json:
        _emit(stats)
        return EXIT_OK
    print(f"turns\t{stats['turns']}")
    print(f"dialogues\t{stats['dialogues']}")
    print(f"entity types\t{len(stats['entity_types'])}\t{' '.join(stats['entity_types'])}")
    print(f"labels\t{len(stats['labels'])}\t{' '.join(stats['labels'])}")
    print(f"unique span values\t{stats['unique_span_values']}")
    print(f"unique tagged tokens (with IOB prefix)\t{stats['unique_tagged_tokens']}")
    print(f"ill-formed turns\t{stats['ill_formed_turns']}")
    print("type\tspans\tunique values")
    for ent in stats["entity_types"]:
        print(f"{ent}\t{stats['spans_per_type'][ent]}\t{stats['unique_values_per_type'][ent]}")
    print("language\tturns")
    for lang, n in stats["turns_per_language"].items():
        print(f"{lang}\t{n}")
    return EXIT_OK


def _parse_regimes(specs: list[str]) -> dict[str, str | None]:
    regimes: dict[str, str | None] = {}
    for spec in specs:
        name, _, path = spec.partition("=")
        if name not in REGIMES:
            raise ValidationError(f"unknown regime {name!r}; expected one of {REGIMES}")
        regimes[name] = path or None
    return regimes


def cmd_run_grid(args) -> int:
    started = time.perf_counter()
    file_cfg = read_config(args.config)
    resolved = resolve_train_config(file_cfg, {"seed": args.seed, "max_epochs": args.max_epochs,
                                               "hidden_dim": args.hidden_dim})
    variant, tcfg = _split_resolved(resolved)
    overrides = {k: getattr(variant, k) for k in ("hidden_dim", "layers", "cell", "word_dim", "char_dim",
                                                  "char_filters", "context_all_layers",
                                                  "shared_context_embeddings", "iob_constraints")}
    train_c = load_corpus(args.train)
    test_c = load_corpus(args.test)
    if not train_c.label_set.covers(test_c.label_set):
        raise ValidationError("test corpus uses labels absent from the training corpus")
    regimes = _parse_regimes(args.regime or ["custom"])
    variants = args.variants or list(VARIANT_NAMES)
    for v in variants:
        if v not in VARIANT_NAMES:
            raise ValidationError(f"unknown variant {v!r}")
    sgns_opts = {"d": resolved["sgns_dim"], "window": resolved["sgns_window"],
                 "negatives": resolved["sgns_negatives"], "epochs": resolved["sgns_epochs"]}
    cells = run_grid(train_c, test_c, regimes, variants, tcfg, overrides, args.reference, sgns_opts)
    table = {
        "reference_table": args.reference,
        "variants": variants,
        "regimes": list(regimes),
        "cells": [asdict(c) for c in cells],
    }
    tsv = grid_to_tsv(cells)
    artifacts = []
    if args.out:
        atomic_write_text(args.out + ".json", json.dumps(table, indent=2, sort_keys=True) + "\n")
        atomic_write_text(args.out + ".tsv", tsv)
        artifacts = [args.out + ".json", args.out + ".tsv"]
        resolved["regimes"] = ",".join(f"{k}={v or ''}" for k, v in regimes.items())
        resolved["variants"] = ",".join(variants)
        write_manifest(args.out, "run-grid", resolved, tcfg.seed,
                       [args.train, args.test] + [p for p in regimes.values() if p], artifacts, started)
    if args.json:
        _emit(table)
    else:
        sys.stdout.write(tsv)
    for c in cells:
        if c.error:
            log.error("%s / %s: %s", c.variant, c.regime, c.error)
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    started = time.perf_counter()
    if args.kind == "context":
        corpus: Corpus = generate_context_corpus(args.turns, args.seed, args.unambiguous_fraction)
    else:
        corpus = generate_pattern_corpus(args.turns, args.seed)
    save_corpus(corpus, args.out)
    write_manifest(args.out, "gen-synthetic",
                   {"kind": args.kind, "turns": args.turns, "unambiguous_fraction": args.unambiguous_fraction},
                   args.seed, [], [args.out], started)
    return EXIT_OK


def cmd_replay(args) -> int:
    """Re-run a recorded train command and check the artifacts match bitwise."""
    with open(args.manifest, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("command") != "train":
        raise ValidationError(f"replay supports train manifests, not {manifest.get('command')!r}")
    recorded_out = manifest["arguments"]["out"]
    out = args.out or recorded_out
    _train_from_resolved(manifest["config"], manifest["arguments"]["corpus"], out, time.perf_counter())
    mismatched = []
    for path, digest in manifest["artifacts"].items():
        produced = out + path[len(recorded_out):] if path.startswith(recorded_out) else path
        if sha256_file(produced) != digest:
            mismatched.append(produced)
    if mismatched:
        raise ValidationError(f"replay produced different bytes for: {', '.join(mismatched)}")
    log.info("replay reproduced %d artifact(s) bitwise", len(manifest["artifacts"]))
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random draw")
    common.add_argument("--config", default=None, help="flat JSON key-value config file")
    common.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ctxner", description="Context-aware BI-LSTM-CRF slot tagger")
    p.add_argument("--version", action="version", version=f"ctxner {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train one tagger variant")
    t.add_argument("corpus")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--variant", choices=VARIANT_NAMES)
    t.add_argument("--regime", choices=REGIMES)
    t.add_argument("--vectors", help="pre-trained vector file for G* regimes")
    t.add_argument("--max-epochs", dest="max_epochs", type=int)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    t.add_argument("--layers", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="span-level macro-F1 of a checkpoint")
    e.add_argument("model")
    e.add_argument("corpus")
    e.add_argument("--exclude-empty", action="store_true", help="drop types with no gold and no predicted spans")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("tag", parents=[common], help="tag 'system<TAB>user' lines")
    g.add_argument("model")
    g.add_argument("input", nargs="?", default="-")
    g.set_defaults(func=cmd_tag)

    s = sub.add_parser("sgns", parents=[common], help="train skip-gram vectors on a corpus")
    s.add_argument("corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--dims", type=int, default=300)
    s.add_argument("--window", type=int, default=5)
    s.add_argument("--negatives", type=int, default=5)
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--min-count", dest="min_count", type=int, default=1)
    s.set_defaults(func=cmd_sgns)

    i = sub.add_parser("inspect", parents=[common], help="corpus statistics")
    i.add_argument("corpus")
    i.set_defaults(func=cmd_inspect)

    r = sub.add_parser("run-grid", parents=[common], help="train/evaluate the variant x regime grid")
    r.add_argument("train")
    r.add_argument("test")
    r.add_argument("--regime", action="append", help="REGIME or REGIME=VECTORS_PATH (repeatable)")
    r.add_argument("--variants", nargs="+")
    r.add_argument("--max-epochs", dest="max_epochs", type=int)
    r.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    r.add_argument("--reference", default="DSTC-FRAMES-EN", choices=("DSTC-FRAMES-EN", "DSTC-FRAMES-ENHI"))
    r.add_argument("--out", help="write OUT.json and OUT.tsv")
    r.set_defaults(func=cmd_run_grid)

    y = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic corpus")
    y.add_argument("out")
    y.add_argument("--kind", choices=("context", "pattern"), default="context")
    y.add_argument("--turns", type=int, default=2500)
    y.add_argument("--unambiguous-fraction", dest="unambiguous_fraction", type=float, default=0.0)
    y.set_defaults(func=cmd_gen_synthetic)

    m = sub.add_parser("replay", parents=[common], help="reproduce an artifact from its manifest")
    m.add_argument("manifest")
    m.add_argument("--out", help="write to this path instead of the recorded one")
    m.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if getattr(args, "seed", None) is None and args.command in ("sgns", "gen-synthetic"):
        args.seed = 0
    try:
        return args.func(args)
    except (ValidationError, CorpusError, LabelSetMismatch, EmbeddingFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
