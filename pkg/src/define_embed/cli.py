"""Command-line entry point: ``define-embed <command> ...``.

Commands::

    train         --config PATH [--seed N] [--out DIR] [--variant NAME]
    eval          CHECKPOINT CORPUS [--cache FILE]
    export-cache  CHECKPOINT [OUT]
    param-count   --config PATH [--variant NAME ...]
    corr-map      CHECKPOINT --stage NAME [--out DIR]
    grad-check    --config PATH [--variant NAME]

Exit status is 0 on success and non-zero with a one-line reason otherwise.
``DEFINE_THREADS`` caps the worker threads used for cache export.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .analysis import (
    correlation_map,
    effective_embedding_table,
    grad_check,
    randomize_parameters,
    write_map_csv,
    write_map_pgm,
)
from .config import RunConfig
from .corpus import CorpusError, build_vocab
from .embedder import (
    EXPANSION_VARIANTS,
    CacheFormatError,
    ConfigError,
    DefineUnit,
    define_param_count,
    export_cache,
    read_cache,
)
from .lm import CheckpointError, LanguageModel, TrainingDiverged, evaluate, load_checkpoint, save_checkpoint, train
from .tensor import Tensor

EXPECTED_ERRORS = (ConfigError, CorpusError, CacheFormatError, CheckpointError, TrainingDiverged,
                   OSError, ValueError)


def _threads() -> int:
    raw = os.environ.get("DEFINE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError([f"DEFINE_THREADS must be a positive integer, got {raw!r}"])
    return n


def _read(path) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config)
    return cfg.override(**{"seed": getattr(args, "seed", None), "out": getattr(args, "out", None),
                           "model.variant": getattr(args, "variant", None)})


def cmd_train(args) -> int:
    cfg = _load_config(args)
    errs = cfg.problems()
    for key in ("data.train", "data.valid", "out"):
        if cfg[key] is None:
            errs.append(f"{key} is required for train")
    if cfg["model.hidden"] < 1:
        errs.append("model.hidden must be positive for train")
    if errs:
        raise ConfigError(errs)
    train_text = _read(cfg["data.train"])
    vocab = build_vocab(train_text, cfg["data.min_count"])
    cfg = cfg.override(**{"model.vocab_size": len(vocab)})
    unit = DefineUnit(cfg.define_config(len(vocab)))
    model = LanguageModel(unit, cfg.lm_config(), seed=cfg["seed"])

    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json())
    with open(os.path.join(out, "vocab.txt"), "w", encoding="utf-8") as fh:
        fh.write(vocab.dumps())

    metrics = open(os.path.join(out, "metrics.jsonl"), "w", encoding="utf-8")
    timing = open(os.path.join(out, "timing.jsonl"), "w", encoding="utf-8")

    def log(rec):
        print(json.dumps(rec, sort_keys=True), flush=True)
        det = {k: v for k, v in rec.items() if k != "seconds"}
        metrics.write(json.dumps(det, sort_keys=True) + "\n")
        timing.write(json.dumps({"epoch": rec["epoch"], "seconds": rec["seconds"]}) + "\n")

    with metrics, timing:
        train(model, vocab.encode(train_text), vocab.encode(_read(cfg["data.valid"])),
              cfg.train_config(), log=log)
    # the output directory is where the run lives, not part of the model
    portable = {k: v for k, v in cfg.values.items() if k != "out"}
    save_checkpoint(os.path.join(out, "checkpoint.bin"), model, vocab,
                    extra={"config": portable})
    return 0


def cmd_eval(args) -> int:
    model, vocab, header = load_checkpoint(args.checkpoint)
    ids = vocab.encode(_read(args.corpus))
    embed = None
    if args.cache:
        cache = read_cache(args.cache)
        if cache.rows.shape != (len(vocab), model.unit.cfg.out_dim):
            raise CacheFormatError(f"cache shape {cache.rows.shape} does not match checkpoint", 8)
        embed = lambda u: Tensor(cache.rows[u])  # noqa: E731
    ppl = evaluate(model, ids, args.batch_size, args.bptt, embed=embed)
    print(f"perplexity {ppl:.3f}")
    print(json.dumps({"perplexity": ppl, "tokens": int(ids.size)}))
    return 0


def cmd_export_cache(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "cache.defc")
    cache = export_cache(model.unit, threads=_threads())
    cache.save(out)
    print(f"wrote {out}: V={cache.vocab_size} m={cache.m}")
    return 0


PARAM_COLUMNS = ("map", "expansion", "reduce", "context", "classifier", "total")


def param_rows(cfg: RunConfig, variants) -> list[dict]:
    V = cfg["model.vocab_size"]
    if V is None:
        V = len(build_vocab(_read(cfg["data.train"]), cfg["data.min_count"]))
    rows = []
    h, n = cfg["model.hidden"], cfg["model.n"]
    for variant in variants:
        dc = cfg.define_config(V, variant)
        counts = define_param_count(dc)
        row = {"variant": variant, **{k: counts[k] for k in ("map", "expansion", "reduce")}}
        width = [dc.out_dim] + [h] * cfg["model.lstm_layers"]
        row["context"] = sum(4 * (width[i] * h + h * h + h) for i in range(len(width) - 1)) if h else 0
        row["classifier"] = h * n
        row["total"] = sum(row[k] for k in PARAM_COLUMNS[:-1])
        rows.append(row)
    return rows


def cmd_param_count(args) -> int:
    cfg = _load_config(argparse.Namespace(config=args.config))
    cfg.check(need_vocab=True)
    variants = []
    for item in args.variant or [cfg["model.variant"]]:
        variants += list(EXPANSION_VARIANTS) if item == "all" else item.split(",")
    bad = [v for v in variants if v not in EXPANSION_VARIANTS]
    if bad:
        raise ConfigError([f"unknown variant {v!r}" for v in bad])
    rows = param_rows(cfg, variants)
    head = f"{'variant':<16}" + "".join(f"{c:>12}" for c in PARAM_COLUMNS)
    print(head)
    for row in rows:
        print(f"{row['variant']:<16}" + "".join(f"{row[c]:>12d}" for c in PARAM_COLUMNS))
    return 0


def cmd_corr_map(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    table = effective_embedding_table(model.unit, args.stage)
    M = correlation_map(table)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "maps")
    os.makedirs(out, exist_ok=True)
    write_map_csv(M, os.path.join(out, f"{args.stage}.csv"))
    write_map_pgm(M, os.path.join(out, f"{args.stage}.pgm"))
    print(f"wrote {out}/{args.stage}.csv and .pgm ({M.shape[0]}x{M.shape[0]})")
    return 0


def cmd_grad_check(args) -> int:
    cfg = _load_config(args)
    cfg.check()
    if cfg["model.hidden"] < 1:
        raise ConfigError(["model.hidden must be positive for grad-check"])
    V = cfg["model.vocab_size"] or 16
    unit = DefineUnit(cfg.define_config(V))
    model = LanguageModel(unit, cfg.lm_config(), seed=cfg["seed"])
    rng = np.random.default_rng(cfg["seed"])
    randomize_parameters(model, rng)
    B, T = cfg["check.batch_size"], cfg["check.bptt"]
    x = rng.integers(0, V, size=(B, T))
    y = rng.integers(0, V, size=(B, T))
    h = cfg["model.hidden"]
    state = [(Tensor(rng.uniform(-1, 1, (B, h))), Tensor(rng.uniform(-1, 1, (B, h))))
             for _ in model.lstms]

    def loss():
        return model.loss(x, y, state)[0]

    report = grad_check(loss, model, tolerance=cfg["check.tolerance"],
                        samples=cfg["check.samples"], seed=cfg["seed"])
    for name, err in report.errors.items():
        print(f"{name:<24} n={err.size:<6d} max_rel_err={err.max():.3e}")
    print(report.summary())
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="define-embed", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an LSTM LM with a DeFINE embedder")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--variant", choices=EXPANSION_VARIANTS)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus")
    e.add_argument("checkpoint")
    e.add_argument("corpus")
    e.add_argument("--cache", help="use cached embeddings instead of the live unit")
    e.add_argument("--batch-size", type=int, default=10)
    e.add_argument("--bptt", type=int, default=35)
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("export-cache", help="tabulate final embeddings to a .defc file")
    x.add_argument("checkpoint")
    x.add_argument("out", nargs="?")
    x.set_defaults(fn=cmd_export_cache)

    c = sub.add_parser("param-count", help="parameter breakdown per variant")
    c.add_argument("--config", required=True)
    c.add_argument("--variant", action="append",
                   help="variant name, comma list or 'all'; repeatable")
    c.set_defaults(fn=cmd_param_count)

    m = sub.add_parser("corr-map", help="correlation map of one embedding stage")
    m.add_argument("checkpoint")
    m.add_argument("--stage", required=True)
    m.add_argument("--out")
    m.set_defaults(fn=cmd_corr_map)

    g = sub.add_parser("grad-check", help="finite-difference check of the full model")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--variant", choices=EXPANSION_VARIANTS)
    g.set_defaults(fn=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except EXPECTED_ERRORS as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
