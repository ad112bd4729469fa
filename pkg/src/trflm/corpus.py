"""Vocabulary, word classes, sentence encoding and the empirical length prior."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import CorpusError, ValidationError

logger = logging.getLogger(__name__)

UNK = "<unk>"


def read_sentences(path) -> list[list[str]]:
    """Read a whitespace-tokenized UTF-8 corpus, one sentence per line.

    Empty lines are returned as empty lists so callers can count them.
    """
    try:
        with open(path, encoding="utf-8") as f:
            return [line.split() for line in f]
    except (OSError, UnicodeDecodeError) as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc


@dataclass
class Vocabulary:
    words: list[str]
    counts: list[int]
    unk_id: int = 0
    ids: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.ids = {w: i for i, w in enumerate(self.words)}
        if len(self.ids) != len(self.words):
            raise ValidationError("duplicate words in vocabulary")
        if len(self.counts) != len(self.words):
            raise ValidationError("counts and words differ in length")
        if not 0 <= self.unk_id < len(self.words):
            raise ValidationError("unk_id out of range")

    def __len__(self):
        return len(self.words)

    def __eq__(self, other):
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return (self.words == other.words and list(self.counts) == list(other.counts)
                and self.unk_id == other.unk_id)

    def id(self, word: str) -> int:
        return self.ids.get(word, self.unk_id)

    def word(self, i: int) -> str:
        return self.words[i]

    def encode(self, tokens: Iterable[str]) -> tuple[int, ...]:
        ids, unk = self.ids, self.unk_id
        return tuple(ids.get(t, unk) for t in tokens)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.words[i] for i in ids]

    def save(self, path):
        from .fileio import atomic_write

        lines = [f"{w}\t{i}\t{c}\n" for i, (w, c) in enumerate(zip(self.words, self.counts))]
        atomic_write(path, "".join(lines))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        words, counts = [], []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3 or int(parts[1]) != len(words):
                    raise CorpusError(f"{path}:{lineno}: expected 'word<TAB>id<TAB>count' with ascending ids")
                words.append(parts[0])
                counts.append(int(parts[2]))
        if UNK not in words:
            raise CorpusError(f"{path}: vocabulary lacks the {UNK} token")
        return cls(words, counts, unk_id=words.index(UNK))


def vocab_from_sentences(sentences: Iterable[Sequence[str]], max_size: Optional[int] = None,
                         min_count: int = 1) -> Vocabulary:
    """Build a vocabulary from tokenized sentences.

    ``<unk>`` takes id 0; the remaining words follow in order of descending
    frequency, ties broken lexicographically. ``max_size`` bounds the number
    of regular words (``<unk>`` excluded). The recorded ``<unk>`` count is the
    number of training tokens that fall back to it.
    """
    counts = Counter()
    n_sent = 0
    for sent in sentences:
        if sent:
            n_sent += 1
            counts.update(sent)
    if n_sent == 0:
        raise CorpusError("empty corpus")
    unk_count = counts.pop(UNK, 0)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [(w, c) for w, c in ranked if c >= min_count]
    if max_size is not None:
        kept = kept[:max_size]
    kept_set = {w for w, _ in kept}
    unk_count += sum(c for w, c in ranked if w not in kept_set)
    return Vocabulary([UNK] + [w for w, _ in kept], [unk_count] + [c for _, c in kept], unk_id=0)


def build_vocab(corpus_path, max_size: Optional[int] = None, min_count: int = 1) -> Vocabulary:
    return vocab_from_sentences(read_sentences(corpus_path), max_size=max_size, min_count=min_count)


@dataclass
class ClassMap:
    class_of: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.class_of = np.asarray(self.class_of, dtype=np.int64)
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        if self.class_of.size and (self.class_of.min() < 0 or self.class_of.max() >= self.num_classes):
            raise ValidationError("class id out of range")

    def __eq__(self, other):
        if not isinstance(other, ClassMap):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.class_of, other.class_of)

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.class_of == c)

    def save(self, path, vocab: Vocabulary):
        from .fileio import atomic_write

        atomic_write(path, "".join(f"{w}\t{c}\n" for w, c in zip(vocab.words, self.class_of)))


def frequency_buckets(counts: Sequence[int], num_classes: int) -> np.ndarray:
    """Split items, sorted by descending count, into contiguous buckets of near-equal mass.

    A bucket is closed once the running mass reaches its share of the total;
    a bucket is also closed early when the remaining items are just enough to
    give every remaining bucket one item. Returns the bucket of each item in
    the original order.
    """
    n = len(counts)
    if not 1 <= num_classes <= n:
        raise ValidationError(f"num_classes must lie in [1, {n}], got {num_classes}")
    order = sorted(range(n), key=lambda i: (-counts[i], i))
    total = float(sum(counts))
    out = np.empty(n, dtype=np.int64)
    bucket, mass, in_bucket = 0, 0.0, 0
    for j, i in enumerate(order):
        remaining = n - j
        if in_bucket and remaining <= num_classes - 1 - bucket:
            bucket, in_bucket = bucket + 1, 0
        out[i] = bucket
        in_bucket += 1
        mass += counts[i]
        if bucket < num_classes - 1 and mass >= (bucket + 1) * total / num_classes:
            bucket, in_bucket = bucket + 1, 0
    return out


def read_class_map(path, vocab: Vocabulary, num_classes: int) -> ClassMap:
    """Load a ``word class_id`` file. Unmapped words take the class of ``<unk>`` (0 if unmapped)."""
    assigned = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise CorpusError(f"{path}:{lineno}: expected 'word class_id'")
            word, c = parts[0], int(parts[1])
            if not 0 <= c < num_classes:
                raise ValidationError(f"{path}:{lineno}: class id {c} >= num_classes {num_classes}")
            if word not in vocab.ids:
                logger.warning("%s:%d: word %r not in vocabulary, skipped", path, lineno, word)
                continue
            assigned[vocab.ids[word]] = c
    unk_class = assigned.get(vocab.unk_id, 0)
    return ClassMap([assigned.get(i, unk_class) for i in range(len(vocab))], num_classes)


def assign_classes(vocab: Vocabulary, num_classes: int, external_map=None) -> ClassMap:
    if external_map is not None:
        return read_class_map(external_map, vocab, num_classes)
    return ClassMap(frequency_buckets(vocab.counts, num_classes), num_classes)


@dataclass
class EncodedCorpus:
    sentences: list[tuple[int, ...]]
    max_len: int
    n_truncated: int = 0
    n_skipped: int = 0

    def __len__(self):
        return len(self.sentences)

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)


def encode_sentences(sentences: Iterable[Sequence[str]], vocab: Vocabulary, m: int) -> EncodedCorpus:
    if m < 1:
        raise ValidationError("maximum length must be >= 1")
    out, truncated, skipped = [], 0, 0
    for sent in sentences:
        if not sent:
            skipped += 1
            continue
        if len(sent) > m:
            truncated += 1
            sent = sent[:m]
        out.append(vocab.encode(sent))
    if truncated or skipped:
        logger.info("encode: %d sentences truncated to %d tokens, %d empty lines skipped",
                    truncated, m, skipped)
    return EncodedCorpus(out, m, truncated, skipped)


def encode(corpus_path, vocab: Vocabulary, m: int = 82) -> EncodedCorpus:
    return encode_sentences(read_sentences(corpus_path), vocab, m)


@dataclass
class LengthPrior:
    """Empirical length distribution; arrays are indexed by length, slot 0 unused."""

    counts: np.ndarray
    total: int = field(init=False)
    pi: np.ndarray = field(init=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1 or self.counts.size < 2 or self.counts[0] != 0:
            raise ValidationError("length counts must be indexed from 1 with slot 0 empty")
        if (self.counts < 0).any():
            raise ValidationError("negative length count")
        self.total = int(self.counts.sum())
        if self.total == 0:
            raise CorpusError("empty corpus")
        self.pi = self.counts / self.total

    @property
    def m(self) -> int:
        return self.counts.size - 1

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.counts)

    def __eq__(self, other):
        if not isinstance(other, LengthPrior):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)


def length_stats(corpus: EncodedCorpus) -> LengthPrior:
    """Empirical length prior; the model length range ends at the longest sentence seen."""
    if not corpus.sentences:
        raise CorpusError("empty corpus")
    lengths = np.fromiter((len(s) for s in corpus.sentences), dtype=np.int64)
    return LengthPrior(np.bincount(lengths, minlength=lengths.max() + 1))
