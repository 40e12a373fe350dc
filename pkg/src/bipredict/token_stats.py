"""Token bags, tokenizers and incremental entropy accumulation.

Text is represented as an order-free bag of integer token ids. Entropies
are in bits. The accumulator keeps a running ``sum(c * log2(c))`` so that
appending tokens costs O(tokens appended) no matter how large the bag
already is::

    H = log2(N) - sum_i c_i * log2(c_i) / N
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

MODES = ("pretokenized", "whitespace", "byte")


def _xlog2x(c: int) -> float:
    return c * math.log2(c) if c > 0 else 0.0


@dataclass(frozen=True)
class TokenizerSpec:
    """How message fields become token ids.

    ``pretokenized`` expects integer id lists in the input records and is
    the only mode that reproduces an external tokenizer exactly.
    ``lowercase`` only affects whitespace mode.
    """

    mode: str = "pretokenized"
    lowercase: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown tokenizer mode {self.mode!r}; expected one of {MODES}")

    @property
    def takes_text(self) -> bool:
        return self.mode != "pretokenized"

    def to_dict(self) -> dict:
        return {"mode": self.mode, "lowercase": self.lowercase}


class Tokenizer:
    """Per-conversation tokenizer with a first-seen intern table."""

    def __init__(self, spec: TokenizerSpec | None = None, vocab: Mapping[str, int] | None = None):
        self.spec = spec or TokenizerSpec(mode="whitespace")
        if not self.spec.takes_text:
            raise ValueError("pretokenized mode has no tokenizer; supply token ids directly")
        self.vocab: dict[str, int] = dict(vocab or {})

    def __call__(self, text: str) -> list[int]:
        return tokenize(text, self.spec, self.vocab)


def tokenize(text: str, spec: TokenizerSpec, vocab: dict[str, int] | None = None) -> list[int]:
    """Map ``text`` to token ids.

    Whitespace mode interns words into ``vocab`` (mutated in place) in
    first-seen order; pass the same dict for every message of a
    conversation. Byte mode returns the UTF-8 byte values.
    """
    if spec.mode == "byte":
        return list(text.encode("utf-8"))
    if spec.mode != "whitespace":
        raise ValueError(f"cannot tokenize text in {spec.mode!r} mode")
    if vocab is None:
        vocab = {}
    if spec.lowercase:
        text = text.lower()
    ids = []
    for word in text.split():
        tid = vocab.get(word)
        if tid is None:
            tid = vocab[word] = len(vocab)
        ids.append(tid)
    return ids


class TokenBag:
    """Frequency map from token id to positive count."""

    __slots__ = ("counts", "total")

    def __init__(self, counts: Mapping[int, int] | None = None):
        self.counts: dict[int, int] = {}
        self.total = 0
        if counts:
            for tid, c in counts.items():
                if c < 0:
                    raise ValueError(f"negative count for token {tid}")
                if c:
                    self.counts[tid] = int(c)
                    self.total += int(c)

    @classmethod
    def from_tokens(cls, tokens: Iterable[int]) -> "TokenBag":
        bag = cls()
        bag.counts = dict(Counter(tokens))
        bag.total = sum(bag.counts.values())
        return bag

    def __len__(self):
        return len(self.counts)

    def __eq__(self, other):
        if not isinstance(other, TokenBag):
            return NotImplemented
        return self.counts == other.counts

    def __repr__(self):
        return f"TokenBag({self.counts!r})"

    def merged(self, *others: "TokenBag") -> "TokenBag":
        out = Counter(self.counts)
        for other in others:
            out.update(other.counts)
        return TokenBag(out)


def bag_from_tokens(tokens: Sequence[int]) -> TokenBag:
    return TokenBag.from_tokens(tokens)


def entropy(bag: TokenBag | Mapping[int, int]) -> float:
    """Shannon entropy in bits, ``-sum p log2 p``; 0 for empty bags."""
    counts = bag.counts if isinstance(bag, TokenBag) else bag
    n = sum(counts.values())
    if n <= 1:
        return 0.0
    h = 0.0
    for c in counts.values():
        if c > 0:
            p = c / n
            h -= p * math.log2(p)
    # rounding can leave a tiny negative value on single-symbol bags
    return max(h, 0.0)


def pooled_entropy(bags: Iterable[TokenBag]) -> float:
    """Entropy of the additively merged bags."""
    merged: Counter = Counter()
    for bag in bags:
        merged.update(bag.counts)
    return entropy(merged)


class EntropyAccumulator:
    """Growing token bag with O(1)-per-token entropy maintenance.

    ``updates`` counts individual count increments, i.e. token
    occurrences added, and is what the per-turn cost contract is checked
    against.
    """

    __slots__ = ("counts", "n", "clogc", "updates")

    def __init__(self, tokens: Iterable[int] = ()):
        self.counts: dict[int, int] = {}
        self.n = 0
        self.clogc = 0.0
        self.updates = 0
        self.add(tokens)

    def add(self, tokens: Iterable[int]) -> "EntropyAccumulator":
        batch = Counter(tokens)
        counts = self.counts
        for tid, k in batch.items():
            c = counts.get(tid, 0)
            c2 = c + k
            counts[tid] = c2
            self.clogc += _xlog2x(c2) - _xlog2x(c)
            self.n += k
            self.updates += k
        return self

    def add_bag(self, bag: TokenBag) -> "EntropyAccumulator":
        counts = self.counts
        for tid, k in bag.counts.items():
            c = counts.get(tid, 0)
            counts[tid] = c + k
            self.clogc += _xlog2x(c + k) - _xlog2x(c)
            self.n += k
            self.updates += k
        return self

    @staticmethod
    def _entropy(n: int, clogc: float) -> float:
        if n <= 1:
            return 0.0
        return max(math.log2(n) - clogc / n, 0.0)

    def entropy(self) -> float:
        return self._entropy(self.n, self.clogc)

    def entropy_with(self, *bags: TokenBag) -> float:
        """Entropy of this accumulator pooled with ``bags``, without mutating it.

        Cost is proportional to the distinct tokens in ``bags``.
        """
        if len(bags) == 1:
            extra = bags[0].counts
        else:
            extra = Counter()
            for bag in bags:
                extra.update(bag.counts)
        counts = self.counts
        n = self.n
        clogc = self.clogc
        for tid, k in extra.items():
            c = counts.get(tid, 0)
            clogc += _xlog2x(c + k) - _xlog2x(c)
            n += k
        return self._entropy(n, clogc)

    def to_bag(self) -> TokenBag:
        return TokenBag(self.counts)

    def copy(self) -> "EntropyAccumulator":
        new = EntropyAccumulator()
        new.counts = dict(self.counts)
        new.n = self.n
        new.clogc = self.clogc
        new.updates = self.updates
        return new

    @property
    def total(self) -> int:
        return self.n

    def __repr__(self):
        return f"EntropyAccumulator(n={self.n}, distinct={len(self.counts)}, H={self.entropy():.6f})"


def acc_add(acc: EntropyAccumulator, tokens: Sequence[int]) -> EntropyAccumulator:
    return acc.add(tokens)
