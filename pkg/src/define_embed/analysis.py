"""Embedding-table diagnostics and a finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .embedder import DefineUnit
from .tensor import Tape, Tensor, backward, no_grad


def correlation_map(E) -> np.ndarray:
    """``|E^T E|`` min-max scaled into [0, 1]; a constant map becomes all zeros."""
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2:
        raise ValueError(f"expected a [V x m] table, got shape {E.shape}")
    M = np.abs(E.T @ E)
    M = 0.5 * (M + M.T)  # exact symmetry regardless of BLAS summation order
    lo, hi = M.min(), M.max()
    if hi == lo:
        return np.zeros_like(M)
    return (M - lo) / (hi - lo)


def write_map_csv(M: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"m={M.shape[0]}\n")
        for row in M:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_map_csv(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().strip()
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    if head != f"m={len(rows)}":
        raise ValueError(f"{path}: header {head!r} does not match {len(rows)} rows")
    return np.array(rows)


def write_map_pgm(M: np.ndarray, path) -> None:
    """Binary (P5) 8-bit grayscale, pixel = round(255 * entry)."""
    h, w = M.shape
    pixels = np.rint(255.0 * np.clip(M, 0.0, 1.0)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def effective_embedding_table(unit: DefineUnit, stage: str) -> np.ndarray:
    """Activation at ``stage`` for every token id, one token at a time.

    Stages are ``map``, ``layer1`` .. ``layerN`` and (with a reduce step)
    ``reduce``.
    """
    names = unit.stage_names
    if stage not in names:
        raise ValueError(f"unknown stage {stage!r}; choose from {', '.join(names)}")
    if stage == "map":
        return unit.map_table.data.copy()
    with no_grad():
        rows = [unit.stages(np.array([v]))[stage].data[0] for v in range(unit.cfg.vocab_size)]
    return np.stack(rows)


def group_correlation(unit: DefineUnit, layer: int) -> np.ndarray:
    """Cosine similarity between mean-centred per-group activations.

    The output of expansion layer ``layer`` over the whole vocabulary is cut
    column-wise into its ``g`` groups; entry (a, b) compares groups a and b.
    Groups with no variation get 0 against everything, themselves included.
    """
    if not 1 <= layer <= unit.cfg.N:
        raise ValueError(f"layer must be in 1..{unit.cfg.N}, got {layer}")
    g = unit.groups[layer - 1]
    if g < 2:
        raise ValueError(f"layer {layer} has {g} group; need at least 2")
    act = effective_embedding_table(unit, f"layer{layer}")
    width = act.shape[1] // g
    flat = [act[:, j * width:(j + 1) * width].reshape(-1) for j in range(g)]
    flat = [f - f.mean() for f in flat]
    norms = [np.linalg.norm(f) for f in flat]
    C = np.zeros((g, g))
    for a in range(g):
        for b in range(a, g):
            if norms[a] > 0 and norms[b] > 0:
                C[a, b] = C[b, a] = float(flat[a] @ flat[b]) / (norms[a] * norms[b])
    return C


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def rel_error(a, f) -> np.ndarray:
    a, f = np.asarray(a, dtype=np.float64), np.asarray(f, dtype=np.float64)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, np.ndarray] = field(default_factory=dict)
    analytic: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    numeric: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    exhaustive: bool = True

    @property
    def max_error(self) -> float:
        return max((float(e.max()) for e in self.errors.values() if e.size), default=0.0)

    @property
    def checked(self) -> int:
        return sum(e.size for e in self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=lambda k: self.errors[k].max() if self.errors[k].size else 0.0)
        return name, float(self.errors[name].max())

    def summary(self) -> str:
        mode = "exhaustive" if self.exhaustive else "sampled"
        status = "PASS" if self.passed else "FAIL"
        name, err = self.worst() if self.errors else ("-", 0.0)
        return (f"{status}: {self.checked} entries ({mode}), max rel err {err:.3e} "
                f"in {name}, tolerance {self.tolerance:.0e}")


def randomize_parameters(params, rng: np.random.Generator, scale: float = 1.0) -> None:
    """Redraw every parameter uniformly from [-scale, scale] in place.

    Central differences at h=1e-5 carry about 1e-11 of absolute roundoff, so
    a relative check is only meaningful where gradients are well above that.
    Trained-scale or freshly initialised weights can leave some entries near
    1e-8; an O(1) evaluation point avoids that without touching the tolerance.
    """
    for _, p in _named(params):
        p.data[...] = rng.uniform(-scale, scale, p.shape)


def _named(params) -> list[tuple[str, Tensor]]:
    if hasattr(params, "named_parameters"):
        return list(params.named_parameters())
    if hasattr(params, "parameters"):
        params = params.parameters()
    out = []
    for i, p in enumerate(params):
        out.append(p if isinstance(p, tuple) else (f"p{i}", p))
    return out


def grad_check(loss_fn: Callable[[], Tensor], params, tolerance: float = 1e-4,
               eps: float = 1e-5, max_exhaustive: int = 10_000, samples: int = 64,
               seed: int = 0) -> GradCheckReport:
    """Compare autodiff gradients with central differences.

    ``params`` is a model/layer exposing ``named_parameters()`` or
    ``parameters()``, or an iterable of tensors or ``(name, tensor)`` pairs.
    Every entry is checked when the total count is at most
    ``max_exhaustive``; otherwise ``samples`` random entries per tensor.
    """
    named = _named(params)
    for _, p in named:
        p.grad = None
    with Tape():
        loss = loss_fn()
        backward(loss)
    total = sum(p.size for _, p in named)
    exhaustive = total <= max_exhaustive
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance, exhaustive=exhaustive)

    def value() -> float:
        with no_grad():
            return loss_fn().item()

    for name, p in named:
        analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).copy()
        if exhaustive or p.size <= samples:
            idx = np.arange(p.size)
        else:
            idx = np.sort(rng.choice(p.size, size=samples, replace=False))
        flat = p.data.reshape(-1)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * eps)
        report.analytic[name] = analytic[idx]
        report.numeric[name] = numeric
        report.errors[name] = rel_error(analytic[idx], numeric)
    for _, p in named:
        p.grad = None
    return report

