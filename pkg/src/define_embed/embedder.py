"""Map-Expand-Reduce token embedder with the DeFINE input skip connection.

A token id is looked up in a narrow ``V x n`` map table, expanded to width
``k`` by a stack of group linear layers, and projected down to width ``m``.
In the DEFINE expansion every layer after the first also sees the original
``n``-wide lookup: both the lookup and the previous layer output are cut
into ``g`` chunks and chunk ``j`` of each is joined (input chunk first)
before group ``j``'s matrix is applied.

After training the whole map is a fixed per-token function, so it can be
tabulated once into an :class:`EmbeddingCache` and reloaded for inference.
"""

from __future__ import annotations

import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .tensor import (
    DivisibilityError,
    Tensor,
    concat,
    embedding_lookup,
    matmul,
    no_grad,
    split,
)
from .transforms import (
    ACTIVATIONS,
    VARIANTS as STACK_VARIANTS,
    GroupLinearLayer,
    TransformSpec,
    TransformStack,
    dim_schedule,
    group_schedule,
    group_transform,
)

EXPANSION_VARIANTS = ("HGT", "HGT_RESIDUAL", "DEFINE", "DEFINE_NO_MIXER", "LT", "GLT",
                      "GLT_SHUFFLE")
MIXER_VARIANTS = ("DEFINE", "DEFINE_NO_MIXER")

CACHE_MAGIC = b"DEFC"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIII")


class ConfigError(ValueError):
    """Configuration violates one or more constraints (all are listed)."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class CacheFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


@dataclass
class DefineConfig:
    vocab_size: int
    n: int
    k: int
    m: int
    N: int
    g_max: int
    expansion_variant: str = "DEFINE"
    use_reduce: bool = True
    seed: int = 0
    dims: list[int] | None = None  # explicit widths override the linear schedule
    bias: bool = False
    activation: str = "none"

    @property
    def out_dim(self) -> int:
        return self.m if self.use_reduce else self.k

    def problems(self) -> list[str]:
        out = []
        for name in ("vocab_size", "n", "k", "m", "N", "g_max"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                out.append(f"{name} must be a positive integer, got {v!r}")
        if out:
            return out
        if self.expansion_variant not in EXPANSION_VARIANTS:
            out.append(f"expansion_variant {self.expansion_variant!r} not in {EXPANSION_VARIANTS}")
        if self.activation not in ACTIVATIONS:
            out.append(f"activation {self.activation!r} not in {tuple(ACTIVATIONS)}")
        if self.n % self.g_max:
            out.append(f"n={self.n} is not divisible by g_max={self.g_max}")
        if self.k % self.g_max:
            out.append(f"k={self.k} is not divisible by g_max={self.g_max}")
        if self.n > self.k:
            out.append(f"n={self.n} must not exceed k={self.k}")
        if self.expansion_variant == "HGT_RESIDUAL" and (self.k % 2 or (self.k // 2) % self.g_max):
            out.append(f"HGT_RESIDUAL needs k/2 divisible by g_max={self.g_max}")
        if self.dims is not None:
            d = list(self.dims)
            if len(d) != self.N + 1:
                out.append(f"dims has {len(d)} entries, need N+1={self.N + 1}")
            elif d[0] != self.n or d[-1] != self.k:
                out.append(f"dims must start at n={self.n} and end at k={self.k}")
            if any(x % self.g_max for x in d):
                out.append(f"every entry of dims must be divisible by g_max={self.g_max}")
        return out

    def check(self) -> None:
        errs = self.problems()
        if errs:
            raise ConfigError(errs)

    def expansion_dims(self) -> list[int]:
        if self.dims is not None:
            return list(self.dims)
        if self.expansion_variant == "HGT_RESIDUAL":
            return ([self.n] + [self.k // 2] * (self.N - 1) + [self.k]) if self.N > 1 else [self.n, self.k]
        return dim_schedule(self.n, self.k, self.N, self.g_max)

    def expansion_groups(self) -> list[int]:
        v = self.expansion_variant
        if v == "LT":
            return [1] * self.N
        if v in ("GLT", "GLT_SHUFFLE"):
            return [self.g_max] * self.N
        return group_schedule(self.g_max, self.N)

    def to_dict(self) -> dict:
        return asdict(self)


def define_param_count(cfg: DefineConfig) -> dict[str, int]:
    """Closed-form parameter breakdown of a DeFINE unit."""
    cfg.check()
    dims, groups = cfg.expansion_dims(), cfg.expansion_groups()
    expansion = 0
    for l in range(cfg.N):
        fan_in = dims[l]
        if cfg.expansion_variant in MIXER_VARIANTS and l > 0:
            fan_in += cfg.n
        expansion += fan_in * dims[l + 1] // groups[l]
        if cfg.bias:
            expansion += dims[l + 1]
    counts = {
        "map": cfg.vocab_size * cfg.n,
        "expansion": expansion,
        "reduce": cfg.k * cfg.m + (cfg.m if cfg.bias else 0) if cfg.use_reduce else 0,
    }
    counts["total"] = counts["map"] + counts["expansion"] + counts["reduce"]
    return counts


def define_layer_forward(e_i: Tensor, prev: Tensor, layer: GroupLinearLayer,
                         mixer: bool = True, index: int | None = None) -> Tensor:
    """One DeFINE expansion layer fed by the lookup ``e_i`` and ``prev``.

    With ``mixer`` group j sees ``[chunk_j(e_i), chunk_j(prev)]``; without it
    the plain group transform runs on ``[e_i, prev]``.
    """
    g = layer.g
    n, d = e_i.shape[-1], prev.shape[-1]
    where = f"layer {index}" if index is not None else "layer"
    if n % g or d % g:
        raise DivisibilityError(
            f"DeFINE {where}: input widths n={n}, prev={d} not divisible by g={g}")
    if not mixer:
        return group_transform(concat([e_i, prev]), layer)
    if n + d != layer.in_dim:
        raise DivisibilityError(f"DeFINE {where}: expects width {layer.in_dim}, got {n}+{d}")
    mixed = [concat([a, b]) for a, b in zip(split(e_i, g), split(prev, g))]
    y = concat([matmul(x, w) for x, w in zip(mixed, layer.weights)])
    if layer.bias is not None:
        y = y + layer.bias
    return y


class DefineUnit:
    """Map table, expansion layers and optional reduce projection."""

    def __init__(self, cfg: DefineConfig):
        cfg.check()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.map_table = Tensor(rng.uniform(-0.1, 0.1, size=(cfg.vocab_size, cfg.n)),
                                requires_grad=True, name="map")
        dims, groups = cfg.expansion_dims(), cfg.expansion_groups()
        self.dims, self.groups = dims, groups
        if cfg.expansion_variant in MIXER_VARIANTS:
            self.stack = None
            self.layers = [
                GroupLinearLayer.init(dims[l] + (cfg.n if l else 0), dims[l + 1], groups[l],
                                      rng, cfg.bias)
                for l in range(cfg.N)
            ]
        else:
            spec = TransformSpec(cfg.expansion_variant, dims, groups,
                                 cfg.g_max if cfg.expansion_variant in ("GLT", "GLT_SHUFFLE") else None,
                                 shuffle_seed=cfg.seed)
            self.stack = TransformStack.init(spec, rng, cfg.bias, cfg.activation)
            self.layers = self.stack.layers
        self.reduce = GroupLinearLayer.init(cfg.k, cfg.m, 1, rng, cfg.bias) if cfg.use_reduce else None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("map", self.map_table)]
        for l, layer in enumerate(self.layers, start=1):
            out += [(f"expand{l}.w{j}", w) for j, w in enumerate(layer.weights)]
            if layer.bias is not None:
                out.append((f"expand{l}.b", layer.bias))
        if self.reduce is not None:
            out.append(("reduce.w0", self.reduce.weights[0]))
            if self.reduce.bias is not None:
                out.append(("reduce.b", self.reduce.bias))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def allocated_counts(self) -> dict[str, int]:
        exp = sum(p.size for layer in self.layers for p in layer.parameters())
        red = self.reduce.param_count() if self.reduce is not None else 0
        counts = {"map": self.map_table.size, "expansion": exp, "reduce": red}
        counts["total"] = sum(counts.values())
        return counts

    @property
    def stage_names(self) -> list[str]:
        names = ["map"] + [f"layer{l}" for l in range(1, self.cfg.N + 1)]
        return names + (["reduce"] if self.reduce is not None else [])

    def stages_from_map(self, e_i: Tensor) -> dict[str, Tensor]:
        out = {"map": e_i}
        if self.stack is not None:
            outs = self.stack.stages(e_i)
        else:
            act = ACTIVATIONS[self.cfg.activation]
            mixer = self.cfg.expansion_variant == "DEFINE"
            outs, h = [], e_i
            for l, layer in enumerate(self.layers):
                if l == 0:
                    h = group_transform(e_i, layer)
                else:
                    h = define_layer_forward(e_i, h, layer, mixer=mixer, index=l + 1)
                if act is not None:
                    h = act(h)
                outs.append(h)
        for l, y in enumerate(outs, start=1):
            out[f"layer{l}"] = y
        if self.reduce is not None:
            out["reduce"] = group_transform(outs[-1], self.reduce)
        return out

    def stages(self, ids) -> dict[str, Tensor]:
        return self.stages_from_map(embedding_lookup(self.map_table, ids))

    def __call__(self, ids) -> Tensor:
        st = self.stages(ids)
        return st["reduce"] if self.reduce is not None else st[f"layer{self.cfg.N}"]


def forward_embed(unit: DefineUnit, ids) -> Tensor:
    """Final embedding ``e_o`` for each id, shape ``[len(ids) x out_dim]``."""
    return unit(np.asarray(ids, dtype=np.int64))


@dataclass
class EmbeddingCache:
    """Token-indexed table of final embeddings.

    Rows are held as float64 but always carry float32-representable values,
    so a save/load round trip is lossless.
    """

    rows: np.ndarray = field(repr=False)

    @property
    def vocab_size(self) -> int:
        return self.rows.shape[0]

    @property
    def m(self) -> int:
        return self.rows.shape[1]

    def to_bytes(self) -> bytes:
        payload = np.ascontiguousarray(self.rows, dtype="<f4").tobytes()
        head = _CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, self.vocab_size, self.m)
        return head + payload + struct.pack("<I", zlib.crc32(payload))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())


def export_cache(unit: DefineUnit, threads: int = 1) -> EmbeddingCache:
    """Tabulate ``forward_embed`` for every id, one token at a time.

    Rows are independent, so ``threads > 1`` only changes who computes a
    row, never its value or position.
    """
    V = unit.cfg.vocab_size

    def row(v: int) -> np.ndarray:
        with no_grad():
            return forward_embed(unit, [v]).data[0]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, range(V)))
    else:
        rows = [row(v) for v in range(V)]
    table = np.stack(rows).astype(np.float32).astype(np.float64)
    return EmbeddingCache(table)


def load_cache(blob: bytes) -> EmbeddingCache:
    size = len(blob)
    if size < _CACHE_HEADER.size:
        raise CacheFormatError(f"truncated header: {size} of {_CACHE_HEADER.size} bytes", size)
    magic, version, V, m = _CACHE_HEADER.unpack_from(blob, 0)
    if magic != CACHE_MAGIC:
        raise CacheFormatError(f"bad magic {magic!r}", 0)
    if version != CACHE_VERSION:
        raise CacheFormatError(f"unsupported version {version}", 4)
    if V == 0 or m == 0:
        raise CacheFormatError(f"empty table V={V} m={m}", 8)
    start = _CACHE_HEADER.size
    end = start + 4 * V * m
    if size < end + 4:
        raise CacheFormatError(f"truncated payload: need {end + 4} bytes, have {size}", size)
    if size > end + 4:
        raise CacheFormatError(f"{size - end - 4} trailing bytes", end + 4)
    payload = blob[start:end]
    (crc,) = struct.unpack_from("<I", blob, end)
    if crc != zlib.crc32(payload):
        raise CacheFormatError("checksum mismatch", end)
    rows = np.frombuffer(payload, dtype="<f4").reshape(V, m).astype(np.float64)
    return EmbeddingCache(rows)


def read_cache(path) -> EmbeddingCache:
    with open(path, "rb") as fh:
        return load_cache(fh.read())


def cached_embed(cache: EmbeddingCache, ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cache.vocab_size):
        raise IndexError(f"token id out of range [0, {cache.vocab_size})")
    return cache.rows[ids]
