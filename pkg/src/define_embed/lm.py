"""Desk-scale LSTM language model on top of a DeFINE embedder.

The output layer is tied to the embedder's narrow map table: hidden states
are projected ``h -> n`` and scored against every row of the ``V x n`` map
table, so no ``V x h`` output matrix exists.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np

from .corpus import BatchStream, Vocab, batchify
from .embedder import DefineConfig, DefineUnit
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    concat,
    embedding_lookup,
    matmul,
    mul,
    no_grad,
    scale,
    sigmoid,
    softmax_cross_entropy,
    split,
    tanh,
    transpose,
)

CKPT_MAGIC = b"DEFM"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class LstmLayer:
    """Single LSTM layer; gate blocks ordered input, forget, cell, output."""

    def __init__(self, input_dim: int, hidden: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(hidden)
        self.input_dim, self.hidden = input_dim, hidden
        self.w_x = Tensor(rng.uniform(-bound, bound, (input_dim, 4 * hidden)), requires_grad=True)
        self.w_h = Tensor(rng.uniform(-bound, bound, (hidden, 4 * hidden)), requires_grad=True)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.b = Tensor(b, requires_grad=True)

    def named_parameters(self):
        return [("w_x", self.w_x), ("w_h", self.w_h), ("b", self.b)]

    def param_count(self) -> int:
        return 4 * (self.input_dim * self.hidden + self.hidden * self.hidden + self.hidden)

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[-1] != self.input_dim or h.shape[-1] != self.hidden or c.shape != h.shape:
            raise ShapeError(
                f"lstm_step: x {x.shape}, h {h.shape}, c {c.shape} for "
                f"input {self.input_dim}, hidden {self.hidden}")
        z = add(add(matmul(x, self.w_x), matmul(h, self.w_h)), self.b)
        zi, zf, zg, zo = split(z, 4)
        i, f, o = sigmoid(zi), sigmoid(zf), sigmoid(zo)
        c_new = add(mul(f, c), mul(i, tanh(zg)))
        return mul(o, tanh(c_new)), c_new


def lstm_step(layer: LstmLayer, x, h, c):
    return layer.step(x, h, c)


class TiedClassifier:
    """Logits ``(h P) E^T`` against the shared map table ``E``."""

    def __init__(self, hidden: int, table: Tensor, rng: np.random.Generator,
                 zero_init: bool = False):
        n = table.shape[1]
        bound = 1.0 / math.sqrt(hidden)
        init = np.zeros((hidden, n)) if zero_init else rng.uniform(-bound, bound, (hidden, n))
        self.proj = Tensor(init, requires_grad=True)
        self.table = table

    def param_count(self) -> int:
        return self.proj.size

    def __call__(self, h: Tensor) -> Tensor:
        return matmul(matmul(h, self.proj), transpose(self.table))


def logits(classifier: TiedClassifier, h: Tensor) -> Tensor:
    return classifier(h)


@dataclass
class LMConfig:
    hidden: int = 256
    layers: int = 1
    dropout: float = 0.0
    zero_projection: bool = False


class LanguageModel:
    def __init__(self, unit: DefineUnit, cfg: LMConfig, seed: int = 0):
        self.unit = unit
        self.cfg = cfg
        rng = np.random.default_rng([seed, 1])
        dims = [unit.cfg.out_dim] + [cfg.hidden] * cfg.layers
        self.lstms = [LstmLayer(dims[i], dims[i + 1], rng) for i in range(cfg.layers)]
        self.classifier = TiedClassifier(cfg.hidden, unit.map_table, rng, cfg.zero_projection)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"unit.{name}", p) for name, p in self.unit.named_parameters()]
        for i, layer in enumerate(self.lstms):
            out += [(f"lstm{i}.{name}", p) for name, p in layer.named_parameters()]
        out.append(("classifier.proj", self.classifier.proj))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_breakdown(self) -> dict[str, int]:
        unit = self.unit.allocated_counts()
        out = {k: unit[k] for k in ("map", "expansion", "reduce")}
        out["context"] = sum(layer.param_count() for layer in self.lstms)
        out["classifier"] = self.classifier.param_count()
        out["total"] = sum(out.values())
        return out

    def init_state(self, batch_size: int) -> list[tuple[Tensor, Tensor]]:
        z = np.zeros((batch_size, self.cfg.hidden))
        return [(Tensor(z), Tensor(z)) for _ in self.lstms]

    def loss(self, inputs: np.ndarray, targets: np.ndarray, state,
             embed: Callable[[np.ndarray], Tensor] | None = None,
             rng: np.random.Generator | None = None, reduction: str = "mean"):
        """Cross-entropy of one ``[B x T]`` window; returns ``(loss, state)``.

        Each distinct token in the window is embedded once; ``embed`` swaps
        the live unit for another source (e.g. a cache).  Dropout is active
        only when ``rng`` is given.
        """
        inputs = np.asarray(inputs, dtype=np.int64)
        B, T = inputs.shape
        uniq, inv = np.unique(inputs, return_inverse=True)
        inv = inv.reshape(B, T)
        table = embed(uniq) if embed is not None else self.unit(uniq)
        p = self.cfg.dropout if rng is not None else 0.0
        state = list(state)
        outs = []
        for t in range(T):
            x = embedding_lookup(table, inv[:, t])
            if p > 0:
                x = _dropout(x, p, rng)
            for i, layer in enumerate(self.lstms):
                h, c = layer.step(x, *state[i])
                state[i] = (h, c)
                x = h
            if p > 0:
                x = _dropout(x, p, rng)
            outs.append(x)
        hs = concat(outs, axis=0)
        tgt = np.asarray(targets, dtype=np.int64).T.reshape(-1)
        return softmax_cross_entropy(self.classifier(hs), tgt, reduction), state


def _dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return scale(x, keep)


def _detach(state):
    return [(h.detach(), c.detach()) for h, c in state]


@dataclass
class TrainConfig:
    epochs: int = 5
    lr: float = 20.0
    clip: float = 0.25
    batch_size: int = 20
    bptt: int = 35
    seed: int = 0
    optimizer: str = "SGD"
    momentum: float = 0.9
    lr_decay: float = 4.0
    eval_batch_size: int = 10


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if total > max_norm:
        coef = max_norm / (total + 1e-6)
        for g in grads:
            g *= coef
    return total


def perplexity(mean_nll: float) -> float:
    """``exp(mean_nll)``, saturating to inf instead of raising on overflow."""
    return math.exp(mean_nll) if mean_nll < 709.0 else math.inf


def evaluate(model: LanguageModel, ids, batch_size: int = 10, bptt: int = 35,
             embed: Callable[[np.ndarray], Tensor] | None = None) -> float:
    """Perplexity ``exp(mean token NLL)``; does not touch model state."""
    stream = ids if isinstance(ids, BatchStream) else batchify(ids, batch_size, bptt)
    total, count = 0.0, 0
    with no_grad():
        state = model.init_state(stream.batch_size)
        for x, y in stream:
            loss, state = model.loss(x, y, state, embed=embed, reduction="sum")
            total += loss.item()
            count += y.size
    return perplexity(total / count)


def train(model: LanguageModel, train_ids, valid_ids, cfg: TrainConfig,
          log: Callable[[dict], None] | None = None) -> list[dict]:
    """SGD with truncated BPTT; returns one record per epoch.

    Records carry ``epoch``, ``train_ppl``, ``val_ppl``, ``lr`` and
    ``seconds``.  The learning rate is divided by ``lr_decay`` after any
    epoch whose validation perplexity fails to improve.
    """
    if cfg.optimizer not in ("SGD", "SGD+momentum"):
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    stream = batchify(train_ids, cfg.batch_size, cfg.bptt)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params] if cfg.optimizer == "SGD+momentum" else None
    rng = np.random.default_rng([cfg.seed, 2])
    lr = cfg.lr
    best = math.inf
    records = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        state = model.init_state(cfg.batch_size)
        total, count = 0.0, 0
        for step, (x, y) in enumerate(stream):
            state = _detach(state)
            for p in params:
                p.grad = None
            with Tape():
                loss, state = model.loss(x, y, state, rng=rng)
                backward(loss)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch} step {step} (lr={lr})")
            total += value * y.size
            count += y.size
            clip_grad_norm(params, cfg.clip)
            for i, p in enumerate(params):
                if p.grad is None:
                    continue
                if velocity is not None:
                    velocity[i] *= cfg.momentum
                    velocity[i] += p.grad
                    p.data -= lr * velocity[i]
                else:
                    p.data -= lr * p.grad
        val = evaluate(model, valid_ids, cfg.eval_batch_size, cfg.bptt)
        rec = {"epoch": epoch, "train_ppl": perplexity(total / count), "val_ppl": val, "lr": lr,
               "seconds": round(time.perf_counter() - t0, 3)}
        records.append(rec)
        if log is not None:
            log(rec)
        if val < best:
            best = val
        elif cfg.lr_decay > 1.0:
            lr /= cfg.lr_decay
    return records


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 version, u64 header length, JSON header, then every
# parameter array in declaration order as little-endian float64
# ---------------------------------------------------------------------------

def checkpoint_bytes(model: LanguageModel, vocab: Vocab, extra: dict | None = None) -> bytes:
    named = model.named_parameters()
    header = {
        "define": model.unit.cfg.to_dict(),
        "lm": asdict(model.cfg),
        "vocab": {"tokens": vocab.tokens, "freqs": vocab.freqs},
        "params": [[name, list(p.shape)] for name, p in named],
    }
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for _, p in named)
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(head)) + head + body


def save_checkpoint(path, model: LanguageModel, vocab: Vocab, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, vocab, extra))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[LanguageModel, Vocab, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 4 + struct.calcsize("<IQ")
    header = json.loads(blob[start:start + hlen].decode("utf-8"))
    vocab = Vocab(header["vocab"]["tokens"], header["vocab"]["freqs"])
    unit = DefineUnit(DefineConfig(**header["define"]))
    model = LanguageModel(unit, LMConfig(**header["lm"]))
    named = model.named_parameters()
    if [[n, list(p.shape)] for n, p in named] != header["params"]:
        raise CheckpointError(f"{path}: parameter layout does not match its header")
    off = start + hlen
    for _, p in named:
        nbytes = 8 * p.size
        if off + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated at byte offset {off}")
        p.data[...] = np.frombuffer(blob, dtype="<f8", count=p.size, offset=off).reshape(p.shape)
        off += nbytes
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return model, vocab, header
