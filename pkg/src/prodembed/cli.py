"""Subcommand front end: synth, tokenize, pretrain, finetune, embed, search, eval.

Configuration is a key=value text file (dotted section keys, e.g.
``optim.total_steps=5000``) merged over desk-scale defaults, then over
``--set`` command-line overrides. Every run rewrites the fully resolved
configuration next to its outputs so it can be replayed from disk. All
randomness derives from the single ``--seed`` root.
"""

from __future__ import annotations

import argparse
import ast
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from .bpe import load_vocab, save_vocab, train_bpe
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .objectives import LossWeights
from .retrieval import (QueryResult, RetrievalRun, acc_at_k, embed_catalog,
                        load_index, map_at_k, mar_at_k, metrics_report,
                        save_index, topk)
from .synth import (SynthConfig, generate_catalog, read_catalog, split_index,
                    split_queries, write_catalog)
from .trainer import (FinetuneConfig, OptimConfig, classifier_logits,
                      finetune_classifier, pretrain)
from . import verification


def default_config() -> dict:
    """Desk-scale defaults for every section."""
    synth = asdict(SynthConfig())
    synth.pop("seed")
    return {
        "synth": synth,
        "vocab": {"target_size": 2000},
        "model": {"layers": 4, "hidden_dim": 128, "heads": 4, "ffn_dim": 512,
                  "max_title_len": 36, "image_side": None, "patch_size": 16,
                  "dropout": 0.0},
        "optim": asdict(OptimConfig.desk()),
        "finetune": asdict(FinetuneConfig()),
    }


def _parse_value(text: str):
    lowered = text.strip()
    if lowered.lower() in ("true", "false"):
        return lowered.lower() == "true"
    try:
        return ast.literal_eval(lowered)
    except (ValueError, SyntaxError):
        return lowered


def _apply_override(config: dict, key: str, raw: str) -> None:
    if "." not in key:
        raise ValueError(f"config key {key!r} must be section.name")
    section, name = key.split(".", 1)
    if section not in config or name not in config[section]:
        raise ValueError(f"unknown config key {key!r}")
    value = _parse_value(raw)
    if isinstance(value, list):
        value = tuple(value)
    config[section][name] = value


def load_config(path: str | None, overrides) -> dict:
    config = default_config()
    if path:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key=value")
                key, raw = line.split("=", 1)
                _apply_override(config, key.strip(), raw.strip())
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"--set {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        _apply_override(config, key.strip(), raw.strip())
    return config


def write_resolved(config: dict, seed: int, out_dir: str,
                   name: str = "run_config.txt") -> None:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    partial = path + ".partial"
    with open(partial, "w", encoding="utf-8") as fh:
        fh.write(f"# seed={seed}\n")
        for section in sorted(config):
            for key in sorted(config[section]):
                fh.write(f"{section}.{key}={config[section][key]!r}\n")
    os.replace(partial, path)


def _model_config(config: dict, vocab_size: int) -> ModelConfig:
    kwargs = dict(config["model"])
    if kwargs.get("image_side") is None:
        kwargs["image_side"] = config["synth"]["image_side"]
    return ModelConfig(vocab_size=vocab_size, **kwargs)


def _load_catalog(catalog_dir: str):
    """Returns (index records, query records, splits dict)."""
    records = read_catalog(os.path.join(catalog_dir, "manifest.jsonl"))
    index = [r for r in records if r.id.startswith("i")]
    queries = [r for r in records if r.id.startswith("q")]
    with open(os.path.join(catalog_dir, "splits.json"), encoding="utf-8") as fh:
        splits = json.load(fh)
    return index, queries, splits


def _records_by_split(index_records, splits, name):
    wanted = set(splits[name])
    return [r for r in index_records if r.id in wanted]


def _atomic_text(path: str, text: str) -> None:
    partial = path + ".partial"
    with open(partial, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(partial, path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    config = load_config(args.config, args.set)
    scfg = SynthConfig(seed=args.seed, **config["synth"])
    index, queries = generate_catalog(scfg)
    os.makedirs(args.out, exist_ok=True)
    write_catalog(index + queries, args.out)
    split = split_index(index, args.seed)
    qdev, qtest = split_queries(queries, args.seed)
    splits = {"train": split.train, "valid": split.valid, "test": split.test,
              "query_dev": qdev, "query_test": qtest}
    _atomic_text(os.path.join(args.out, "splits.json"),
                 json.dumps(splits, indent=1, sort_keys=True) + "\n")
    write_resolved(config, args.seed, args.out)
    print(f"wrote {len(index)} index + {len(queries)} query records to {args.out}")
    return 0


def cmd_tokenize(args) -> int:
    config = load_config(args.config, args.set)
    index, _, splits = _load_catalog(args.catalog)
    titles = [r.title for r in _records_by_split(index, splits, "train")]
    vocab = train_bpe(titles, config["vocab"]["target_size"])
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    save_vocab(args.out, vocab)
    write_resolved(config, args.seed, out_dir)
    note = " (undersized: corpus ran out of merge pairs)" if vocab.undersized else ""
    print(f"vocab size {vocab.size}{note} -> {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    config = load_config(args.config, args.set)
    index, _, splits = _load_catalog(args.catalog)
    vocab = load_vocab(args.vocab)
    model_cfg = _model_config(config, vocab.size)
    optim_cfg = OptimConfig(**config["optim"])
    train = _records_by_split(index, splits, "train")
    valid = _records_by_split(index, splits, "valid")
    path = pretrain(train, valid, vocab, model_cfg, optim_cfg, args.seed,
                    args.out, weights=LossWeights(),
                    matched_only=args.mask_losses_matched_only,
                    quiet=args.quiet)
    write_resolved(config, args.seed, args.out)
    print(f"best checkpoint -> {path}")
    return 0


def cmd_finetune(args) -> int:
    config = load_config(args.config, args.set)
    index, _, splits = _load_catalog(args.catalog)
    vocab = load_vocab(args.vocab)
    params, model_cfg, _ = load_checkpoint(args.checkpoint)
    ft_cfg = FinetuneConfig(**config["finetune"])
    train = _records_by_split(index, splits, "train")
    valid = _records_by_split(index, splits, "valid")
    n_classes = max(r.leaf_category for r in index) + 1
    best_params, best_epoch, history = finetune_classifier(
        params, model_cfg, train, valid, vocab, n_classes, ft_cfg, args.seed,
        quiet=args.quiet)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "classifier.ckpt")
    save_checkpoint(path, best_params, model_cfg,
                    extra={"task": "classify", "n_classes": n_classes,
                           "best_epoch": best_epoch, "valid_acc": history[best_epoch - 1]})
    write_resolved(config, args.seed, args.out)
    print(f"best epoch {best_epoch} (valid acc {history[best_epoch - 1]:.4f}) -> {path}")
    return 0


def cmd_embed(args) -> int:
    index, queries, _ = _load_catalog(args.catalog)
    vocab = load_vocab(args.vocab)
    params, model_cfg, _ = load_checkpoint(args.checkpoint)
    records = index if args.split == "index" else queries
    emb = embed_catalog(records, params, model_cfg, vocab)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    save_index(args.out, emb)
    print(f"embedded {len(records)} {args.split} records -> {args.out}")
    return 0


def cmd_search(args) -> int:
    index = load_index(args.index_store)
    queries = load_index(args.query_store)
    lines = []
    for row, qid in enumerate(queries.ids):
        ids, scores = topk(queries.triple(row), index, args.k)
        lines.append(json.dumps({"query_id": qid, "ranked_ids": ids,
                                 "scores": scores}))
    _atomic_text(args.out, "\n".join(lines) + "\n")
    print(f"ranked {len(queries.ids)} queries (k={args.k}) -> {args.out}")
    return 0


def _relevance_sets(index_records, query_records):
    by_group: dict[int, list[str]] = {}
    for rec in index_records:
        if rec.match_group is not None:
            by_group.setdefault(rec.match_group, []).append(rec.id)
    return {q.id: frozenset(by_group.get(q.match_group, ()))
            for q in query_records if q.match_group is not None}


def cmd_eval(args) -> int:
    if args.task == "verify":
        reports = verification.run_all(args.seed, fast=args.fast)
        text = "\n".join(r.to_json() for r in reports) + "\n"
        if args.out:
            _atomic_text(args.out, text)
        sys.stdout.write(text)
        failed = [r.name for r in reports if not r.passed]
        if failed:
            print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
            return 1
        print(f"all {len(reports)} oracle checks passed")
        return 0

    if not args.catalog:
        raise ValueError(f"--catalog is required for task {args.task!r}")
    index_records, query_records, splits = _load_catalog(args.catalog)

    if args.task == "search":
        if not args.results:
            raise ValueError("--results is required for task 'search'")
        with open(args.results, encoding="utf-8") as fh:
            ranked = {row["query_id"]: row for row in map(json.loads, fh)}
        relevance = _relevance_sets(index_records, query_records)
        metrics = {}
        for split_name in ("query_dev", "query_test"):
            results = []
            for qid in splits[split_name]:
                row = ranked.get(qid)
                if row is None:
                    raise ValueError(f"results file missing query {qid}")
                results.append(QueryResult(
                    query_id=qid, ranked_ids=row["ranked_ids"],
                    scores=row["scores"], relevant=relevance[qid]))
            run = RetrievalRun(results)
            short = "dev" if split_name == "query_dev" else "test"
            metrics[short] = {f"MAR@{args.k}": mar_at_k(run, args.k),
                              f"MAP@{args.k}": map_at_k(run, args.k)}
        payload, table = metrics_report(metrics, args.k)
    elif args.task == "classify":
        if not (args.checkpoint and args.vocab):
            raise ValueError("--checkpoint and --vocab are required for task 'classify'")
        vocab = load_vocab(args.vocab)
        params, model_cfg, extra = load_checkpoint(args.checkpoint)
        if "cls_w" not in params:
            raise ValueError(f"{args.checkpoint} has no classifier head")
        metrics = {}
        for split_name in ("valid", "test"):
            records = _records_by_split(index_records, splits, split_name)
            logits = classifier_logits(params, model_cfg, records, vocab)
            labels = [r.leaf_category for r in records]
            short = "dev" if split_name == "valid" else "test"
            metrics[short] = {"Acc@1": acc_at_k(logits, labels, 1),
                              "Acc@5": acc_at_k(logits, labels, 5)}
        payload, table = metrics_report(metrics, args.k)
    else:
        raise ValueError(f"unknown task {args.task!r}")

    if args.out:
        _atomic_text(args.out, payload + "\n")
        _atomic_text(os.path.splitext(args.out)[0] + ".txt", table + "\n")
    print(table)
    print(payload)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p, config=True):
    p.add_argument("--seed", type=int, default=0, help="root seed")
    if config:
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prodembed",
        description="Image-title product embedding: data, pretraining, retrieval.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic product catalog")
    _add_common(p)
    p.add_argument("--out", required=True, help="catalog directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tokenize", help="train the BPE vocabulary")
    _add_common(p)
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True, help="vocab file path")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("pretrain", help="run the pretraining loop")
    _add_common(p)
    p.add_argument("--catalog", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mask-losses-matched-only", action="store_true",
                   help="skip masked losses on mismatched ITM pairs")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune the leaf-category classifier")
    _add_common(p)
    p.add_argument("--catalog", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("embed", help="embed catalog records into a store")
    _add_common(p, config=False)
    p.add_argument("--catalog", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("index", "queries"), default="index")
    p.add_argument("--out", required=True, help="embedding store path")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("search", help="rank the index for every query")
    _add_common(p, config=False)
    p.add_argument("--index-store", required=True)
    p.add_argument("--query-store", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True, help="results JSONL path")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="score a run, or run the oracle suite")
    _add_common(p, config=False)
    p.add_argument("--task", choices=("search", "classify", "verify"),
                   default="search")
    p.add_argument("--catalog")
    p.add_argument("--results", help="search results JSONL (task=search)")
    p.add_argument("--checkpoint", help="classifier checkpoint (task=classify)")
    p.add_argument("--vocab", help="vocab file (task=classify)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--fast", action="store_true",
                   help="smaller oracle sample counts (task=verify)")
    p.add_argument("--out", help="report path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
