"""Run configuration: one flat JSON object with dotted keys.

Example::

    {"model.variant": "DEFINE", "model.n": 64, "train.lr": 5.0,
     "data.train": "data/kjv.train.txt"}

Nested objects are accepted on input and flattened.  Every key has a
default, so an empty document is a valid (if not very useful) config.
"""

from __future__ import annotations

import json
import os
from typing import Any

from .embedder import ConfigError, DefineConfig
from .lm import LMConfig, TrainConfig

_INT, _FLOAT, _BOOL, _STR = "int", "float", "bool", "str"

# key -> (kind, default, nullable)
SCHEMA: dict[str, tuple[str, Any, bool]] = {
    "seed": (_INT, 0, False),
    "out": (_STR, None, True),
    "data.train": (_STR, None, True),
    "data.valid": (_STR, None, True),
    "data.min_count": (_INT, 1, False),
    "model.vocab_size": (_INT, None, True),
    "model.variant": (_STR, "DEFINE", False),
    "model.n": (_INT, 64, False),
    "model.k": (_INT, 256, False),
    "model.m": (_INT, 64, False),
    "model.N": (_INT, 3, False),
    "model.g_max": (_INT, 4, False),
    "model.dims": ("list", None, True),
    "model.use_reduce": (_BOOL, True, False),
    "model.bias": (_BOOL, False, False),
    "model.activation": (_STR, "none", False),
    "model.hidden": (_INT, 128, False),
    "model.lstm_layers": (_INT, 1, False),
    "model.dropout": (_FLOAT, 0.0, False),
    "model.zero_projection": (_BOOL, False, False),
    "train.epochs": (_INT, 5, False),
    "train.lr": (_FLOAT, 20.0, False),
    "train.clip": (_FLOAT, 0.25, False),
    "train.batch_size": (_INT, 20, False),
    "train.bptt": (_INT, 35, False),
    "train.optimizer": (_STR, "SGD", False),
    "train.momentum": (_FLOAT, 0.9, False),
    "train.lr_decay": (_FLOAT, 4.0, False),
    "train.eval_batch_size": (_INT, 10, False),
    "check.tolerance": (_FLOAT, 1e-4, False),
    "check.samples": (_INT, 32, False),
    "check.batch_size": (_INT, 2, False),
    "check.bptt": (_INT, 3, False),
}


def _flatten(obj: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _type_ok(kind: str, v) -> bool:
    if kind == _INT:
        return isinstance(v, int) and not isinstance(v, bool)
    if kind == _FLOAT:
        return isinstance(v, (int, float)) and not isinstance(v, bool)
    if kind == _BOOL:
        return isinstance(v, bool)
    if kind == _STR:
        return isinstance(v, str)
    return isinstance(v, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in v)


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = {k: spec[1] for k, spec in SCHEMA.items()}
        self.values.update(_flatten(values or {}))

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
        if not isinstance(doc, dict):
            raise ConfigError([f"{path}: top level must be a JSON object"])
        cfg = cls(doc)
        base = os.path.dirname(os.path.abspath(path))
        for key in ("data.train", "data.valid"):
            p = cfg.values.get(key)
            if isinstance(p, str) and not os.path.isabs(p) and not os.path.exists(p):
                cand = os.path.join(base, p)
                if os.path.exists(cand):
                    cfg.values[key] = cand
        return cfg

    def override(self, **kv) -> "RunConfig":
        vals = dict(self.values)
        vals.update({k: v for k, v in kv.items() if v is not None})
        return RunConfig(vals)

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls(json.loads(text))

    def problems(self, need_vocab: bool = False) -> list[str]:
        v = self.values
        out = [f"unknown key {k!r}" for k in sorted(v) if k not in SCHEMA]
        bad = set()
        for key, (kind, _, nullable) in SCHEMA.items():
            val = v[key]
            if val is None and nullable:
                continue
            if not _type_ok(kind, val):
                out.append(f"{key} must be of type {kind}, got {val!r}")
                bad.add(key)

        def ok(key):
            return key not in bad

        if ok("model.hidden") and v["model.hidden"] < 0:
            out.append(f"model.hidden must be >= 0, got {v['model.hidden']}")
        for key in ("model.lstm_layers", "train.batch_size", "train.bptt",
                    "train.eval_batch_size", "data.min_count", "check.samples",
                    "check.batch_size", "check.bptt"):
            if ok(key) and v[key] < 1:
                out.append(f"{key} must be positive, got {v[key]}")
        for key in ("train.lr", "train.clip", "check.tolerance"):
            if ok(key) and v[key] <= 0:
                out.append(f"{key} must be positive, got {v[key]}")
        if ok("train.epochs") and v["train.epochs"] < 0:
            out.append(f"train.epochs must be >= 0, got {v['train.epochs']}")
        if ok("model.dropout") and not 0.0 <= v["model.dropout"] < 1.0:
            out.append(f"model.dropout must be in [0, 1), got {v['model.dropout']}")
        if ok("train.momentum") and not 0.0 <= v["train.momentum"] < 1.0:
            out.append(f"train.momentum must be in [0, 1), got {v['train.momentum']}")
        if ok("train.lr_decay") and v["train.lr_decay"] < 1.0:
            out.append(f"train.lr_decay must be >= 1, got {v['train.lr_decay']}")
        if ok("train.optimizer") and v["train.optimizer"] not in ("SGD", "SGD+momentum"):
            out.append(f"train.optimizer must be SGD or SGD+momentum, got {v['train.optimizer']!r}")
        if need_vocab and v["model.vocab_size"] is None and v["data.train"] is None:
            out.append("either model.vocab_size or data.train is required")
        model_keys = [k for k in SCHEMA if k.startswith("model.") or k == "seed"]
        if all(ok(k) for k in model_keys):
            vocab = v["model.vocab_size"] if v["model.vocab_size"] is not None else 2
            out.extend(f"model: {p}" for p in self.define_config(vocab).problems())
        return out

    def check(self, need_vocab: bool = False) -> None:
        errs = self.problems(need_vocab)
        if errs:
            raise ConfigError(errs)

    def define_config(self, vocab_size: int, variant: str | None = None) -> DefineConfig:
        v = self.values
        return DefineConfig(
            vocab_size=vocab_size, n=v["model.n"], k=v["model.k"], m=v["model.m"],
            N=v["model.N"], g_max=v["model.g_max"],
            expansion_variant=variant or v["model.variant"], use_reduce=v["model.use_reduce"],
            seed=v["seed"], dims=v["model.dims"], bias=v["model.bias"],
            activation=v["model.activation"])

    def lm_config(self) -> LMConfig:
        v = self.values
        return LMConfig(hidden=v["model.hidden"], layers=v["model.lstm_layers"],
                        dropout=float(v["model.dropout"]),
                        zero_projection=v["model.zero_projection"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["train.epochs"], lr=float(v["train.lr"]), clip=float(v["train.clip"]),
            batch_size=v["train.batch_size"], bptt=v["train.bptt"], seed=v["seed"],
            optimizer=v["train.optimizer"], momentum=float(v["train.momentum"]),
            lr_decay=float(v["train.lr_decay"]), eval_batch_size=v["train.eval_batch_size"])
