"""Group linear transforms and the stacks built from them.

A group linear layer cuts its input into ``g`` contiguous chunks, maps chunk
``j`` through its own ``(in/g) x (out/g)`` matrix and concatenates the
results.  That is a dense product against a block-diagonal matrix, with
``in*out/g`` weights instead of ``in*out``.

Stacks:

* ``LT``            every layer dense (g = 1)
* ``GLT``           every layer uses the same fixed group count
* ``GLT_SHUFFLE``   GLT plus a fixed seeded feature permutation between layers
* ``HGT``           group count halves per layer, from ``g_max`` down to 1
* ``HGT_RESIDUAL``  HGT with widths fixed at k/2 and identity skips between
                    equal-width layers
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .tensor import (
    DivisibilityError,
    ShapeError,
    Tensor,
    add,
    concat,
    matmul,
    permute,
    split,
    tanh,
)

VARIANTS = ("LT", "GLT", "GLT_SHUFFLE", "HGT", "HGT_RESIDUAL")

ACTIVATIONS = {"none": None, "tanh": tanh}


class GroupLinearLayer:
    """Block-diagonal linear map with one independent matrix per group."""

    def __init__(self, in_dim: int, out_dim: int, g: int, weights: Sequence[Tensor],
                 bias: Tensor | None = None):
        if in_dim % g or out_dim % g:
            raise DivisibilityError(
                f"group layer {in_dim}->{out_dim} not divisible by g={g}")
        if len(weights) != g:
            raise ShapeError(f"expected {g} group matrices, got {len(weights)}")
        for w in weights:
            if w.shape != (in_dim // g, out_dim // g):
                raise ShapeError(
                    f"group matrix shape {w.shape}, expected {(in_dim // g, out_dim // g)}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.g = g
        self.weights = list(weights)
        self.bias = bias

    @classmethod
    def init(cls, in_dim: int, out_dim: int, g: int, rng: np.random.Generator,
             bias: bool = False) -> "GroupLinearLayer":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = in_dim/g."""
        if g < 1 or in_dim % g or out_dim % g:
            raise DivisibilityError(
                f"group layer {in_dim}->{out_dim} not divisible by g={g}")
        a, b = in_dim // g, out_dim // g
        bound = 1.0 / np.sqrt(a)
        ws = [Tensor(rng.uniform(-bound, bound, size=(a, b)), requires_grad=True)
              for _ in range(g)]
        bt = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None
        return cls(in_dim, out_dim, g, ws, bt)

    def parameters(self) -> list[Tensor]:
        return self.weights + ([self.bias] if self.bias is not None else [])

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def block_diagonal(self) -> np.ndarray:
        """Dense ``in_dim x out_dim`` equivalent of the group weights."""
        dense = np.zeros((self.in_dim, self.out_dim))
        a, b = self.in_dim // self.g, self.out_dim // self.g
        for j, w in enumerate(self.weights):
            dense[j * a:(j + 1) * a, j * b:(j + 1) * b] = w.data
        return dense

    def __call__(self, x: Tensor) -> Tensor:
        return group_transform(x, self)


def group_transform(x: Tensor, layer: GroupLinearLayer) -> Tensor:
    """Apply a group linear layer to ``x`` of width ``layer.in_dim``."""
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(
            f"group transform expects width {layer.in_dim}, got input shape {x.shape}")
    chunks = split(x, layer.g)
    y = concat([matmul(c, w) for c, w in zip(chunks, layer.weights)])
    if layer.bias is not None:
        y = add(y, layer.bias)
    return y


def group_schedule(g_max: int, N: int) -> list[int]:
    """Groups per layer, halving from ``g_max`` and floored at 1."""
    if g_max < 1 or N < 1:
        raise ValueError(f"need g_max >= 1 and N >= 1, got g_max={g_max}, N={N}")
    return [max(g_max // 2 ** l, 1) for l in range(N)]


def dim_schedule(n: int, k: int, N: int, g_max: int) -> list[int]:
    """Widths ``n = d0 <= d1 <= ... <= dN = k`` spaced linearly.

    Interior widths are rounded to the nearest multiple of ``g_max``, ties
    rounding up, so every layer splits evenly into its groups.
    """
    problems = []
    if n % g_max:
        problems.append(f"n={n} is not divisible by g_max={g_max}")
    if k % g_max:
        problems.append(f"k={k} is not divisible by g_max={g_max}")
    if problems:
        raise DivisibilityError("; ".join(problems))
    if n > k:
        raise ValueError(f"need n <= k, got n={n}, k={k}")
    if N < 1:
        raise ValueError(f"need N >= 1, got {N}")
    dims = [n]
    for l in range(1, N):
        exact = Fraction(n) + Fraction(k - n) * l / N
        q = exact / g_max
        dims.append(int((q + Fraction(1, 2)) // 1) * g_max)
    dims.append(k)
    return dims


@dataclass
class TransformSpec:
    """Shape plan of a transform stack: widths and group counts per layer."""

    variant: str
    dims: list[int]
    groups: list[int]
    fixed_g: int | None = None
    shuffle_seed: int = 0

    @property
    def N(self) -> int:
        return len(self.groups)

    @classmethod
    def build(cls, variant: str, n: int, k: int, N: int, g_max: int,
              shuffle_seed: int = 0, dims: Sequence[int] | None = None) -> "TransformSpec":
        if variant not in VARIANTS:
            raise ValueError(f"unknown transform variant {variant!r}; expected one of {VARIANTS}")
        if variant == "HGT_RESIDUAL" and dims is None:
            if k % 2 or (k // 2) % g_max:
                raise DivisibilityError(f"k/2={k / 2} is not divisible by g_max={g_max}")
            dims = [n] + [k // 2] * (N - 1) + [k] if N > 1 else [n, k]
        elif dims is None:
            dims = dim_schedule(n, k, N, g_max)
        if variant == "LT":
            groups = [1] * N
        elif variant in ("GLT", "GLT_SHUFFLE"):
            groups = [g_max] * N
        else:
            groups = group_schedule(g_max, N)
        fixed = g_max if variant in ("GLT", "GLT_SHUFFLE") else None
        spec = cls(variant, list(dims), groups, fixed, shuffle_seed)
        spec.check()
        return spec

    def problems(self) -> list[str]:
        out = []
        if self.variant not in VARIANTS:
            out.append(f"unknown variant {self.variant!r}")
        if len(self.dims) != self.N + 1:
            out.append(f"{len(self.dims)} widths for {self.N} layers (need N+1)")
        if self.groups and min(self.groups) < 1:
            out.append("group counts must be >= 1")
        if self.groups:
            gm = max(self.groups)
            for l, d in enumerate(self.dims):
                if d % gm:
                    out.append(f"width d{l}={d} not divisible by {gm}")
        if self.variant == "LT" and any(g != 1 for g in self.groups):
            out.append("LT layers must all use g=1")
        if self.variant in ("GLT", "GLT_SHUFFLE") and any(g != self.fixed_g for g in self.groups):
            out.append(f"GLT layers must all use g={self.fixed_g}")
        if self.variant in ("HGT", "HGT_RESIDUAL") and self.groups:
            if self.groups != group_schedule(self.groups[0], self.N):
                out.append(f"HGT groups {self.groups} do not halve per layer")
        return out

    def check(self) -> None:
        errs = self.problems()
        if errs:
            raise DivisibilityError("invalid transform spec: " + "; ".join(errs))


def param_count(spec: TransformSpec) -> int:
    """Closed-form weight count: sum over layers of d_in * d_out / g."""
    return sum(spec.dims[l] * spec.dims[l + 1] // spec.groups[l] for l in range(spec.N))


def layer_param_formula(variant: str, dims: Sequence[int], g: int | None = None) -> int:
    """Closed form written per variant (LT: d d', GLT: d d'/g, HGT: d d'/g^l)."""
    N = len(dims) - 1
    if variant == "LT":
        return sum(dims[l] * dims[l + 1] for l in range(N))
    if variant in ("GLT", "GLT_SHUFFLE"):
        return sum(dims[l] * dims[l + 1] // g for l in range(N))
    sched = group_schedule(g, N)
    return sum(dims[l] * dims[l + 1] // sched[l] for l in range(N))


@dataclass
class TransformStack:
    spec: TransformSpec
    layers: list[GroupLinearLayer]
    perms: list[np.ndarray] = field(default_factory=list)
    activation: str = "none"

    @classmethod
    def init(cls, spec: TransformSpec, rng: np.random.Generator, bias: bool = False,
             activation: str = "none") -> "TransformStack":
        spec.check()
        layers = [GroupLinearLayer.init(spec.dims[l], spec.dims[l + 1], spec.groups[l], rng, bias)
                  for l in range(spec.N)]
        perms = []
        if spec.variant == "GLT_SHUFFLE":
            # applied even when g == 1 so the wiring never depends on g
            prng = np.random.default_rng(spec.shuffle_seed)
            perms = [prng.permutation(spec.dims[l + 1]) for l in range(spec.N - 1)]
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        return cls(spec, layers, perms, activation)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def stages(self, x: Tensor) -> list[Tensor]:
        """Output of every layer, first to last."""
        act = ACTIVATIONS[self.activation]
        outs = []
        h = x
        for l, layer in enumerate(self.layers):
            if l > 0 and self.perms:
                h = permute(h, self.perms[l - 1])
            y = group_transform(h, layer)
            if act is not None:
                y = act(y)
            if (self.spec.variant == "HGT_RESIDUAL" and l > 0
                    and layer.in_dim == layer.out_dim):
                y = add(y, h)
            outs.append(y)
            h = y
        return outs

    def __call__(self, x: Tensor) -> Tensor:
        return self.stages(x)[-1]


def forward_stack(stack: TransformStack, x: Tensor) -> Tensor:
    if x.shape[-1] != stack.spec.dims[0]:
        raise ShapeError(f"stack expects width {stack.spec.dims[0]}, got {x.shape}")
    return stack(x)
