"""Word-level vocabulary and truncated-BPTT batching."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

UNK, EOS = "<unk>", "<eos>"
UNK_ID, EOS_ID = 0, 1


class CorpusError(ValueError):
    pass


def _lines(text: str) -> Iterator[list[str]]:
    for line in text.splitlines():
        toks = line.split()
        if toks:
            yield toks


@dataclass
class Vocab:
    """Bijection between tokens and dense ids; ids 0 and 1 are reserved."""

    tokens: list[str]
    freqs: list[int]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.tokens[:2] != [UNK, EOS]:
            raise CorpusError("vocabulary must start with <unk>, <eos>")
        if len(self.freqs) != len(self.tokens):
            raise CorpusError("one frequency per token required")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise CorpusError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, text: str) -> np.ndarray:
        """Token ids of ``text``; every non-blank line ends with <eos>."""
        ids = []
        for toks in _lines(text):
            ids.extend(self.index.get(t, UNK_ID) for t in toks)
            ids.append(EOS_ID)
        return np.asarray(ids, dtype=np.int64)

    def dumps(self) -> str:
        return "".join(f"{t}\t{i}\t{f}\n" for i, (t, f) in enumerate(zip(self.tokens, self.freqs)))

    @classmethod
    def loads(cls, text: str) -> "Vocab":
        tokens, freqs = [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            parts = line.split("\t")
            if len(parts) != 3 or int(parts[1]) != lineno - 1:
                raise CorpusError(f"malformed vocab line {lineno}: {line!r}")
            tokens.append(parts[0])
            freqs.append(int(parts[2]))
        return cls(tokens, freqs)


def build_vocab(text: str, min_count: int = 1) -> Vocab:
    """Count whitespace tokens; rare ones fold into <unk>.

    Ids after the reserved pair are ordered by descending frequency, ties
    broken lexicographically, so the same text always yields the same ids.
    """
    counts: Counter = Counter()
    lines = 0
    for toks in _lines(text):
        counts.update(toks)
        lines += 1
    if not lines:
        raise CorpusError("cannot build a vocabulary from empty text")
    if min_count < 1:
        raise CorpusError(f"min_count must be >= 1, got {min_count}")
    counts.pop(UNK, None)
    counts.pop(EOS, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    unk_freq = sum(c for t, c in counts.items() if c < min_count)
    return Vocab([UNK, EOS] + kept, [unk_freq, lines] + [counts[t] for t in kept])


class BatchStream:
    """``B`` parallel streams cut into windows of at most ``T`` steps.

    Stream ``b`` is ``ids[b*L:(b+1)*L]`` with ``L = len(ids) // B``; the
    remainder is dropped.  The last window of an epoch may be shorter.
    """

    def __init__(self, ids, batch_size: int, bptt: int):
        ids = np.asarray(ids, dtype=np.int64)
        if batch_size < 1 or bptt < 1:
            raise CorpusError(f"batch size and bptt must be positive, got {batch_size}, {bptt}")
        need = batch_size * (bptt + 1)
        if ids.size < need:
            raise CorpusError(
                f"need at least {need} tokens for B={batch_size}, T={bptt}; got {ids.size}")
        L = ids.size // batch_size
        self.batch_size = batch_size
        self.bptt = bptt
        self.data = ids[: L * batch_size].reshape(batch_size, L)

    @property
    def stream_len(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return -(-(self.stream_len - 1) // self.bptt)

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        L = self.stream_len
        for i in range(0, L - 1, self.bptt):
            t = min(self.bptt, L - 1 - i)
            yield self.data[:, i:i + t], self.data[:, i + 1:i + 1 + t]

    @property
    def n_targets(self) -> int:
        return self.batch_size * (self.stream_len - 1)


def batchify(ids, batch_size: int, bptt: int) -> BatchStream:
    return BatchStream(ids, batch_size, bptt)
