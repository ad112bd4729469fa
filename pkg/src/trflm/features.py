"""Feature templates, the feature index and sparse feature extraction.

A feature key is a flat tuple ``(kind, distance, *symbols)``:

* ``w`` / ``c``      word / class n-grams, distance 0
* ``ws`` / ``cs``    word / class skip-bigrams ``(x_i, x_{i+k})``, distance k >= 2
* ``wsT`` / ``csT``  tied skip-bigrams; every distance in the tied range maps to
                     one key whose distance field holds the lower end of the range

Symbols are word ids or class ids. With boundaries enabled, n-grams run over
the sentence padded with ``BOS``/``EOS`` (negative sentinels); skip features
never see boundary symbols, and a bare boundary is never a unigram.
"""

from __future__ import annotations

import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .corpus import ClassMap, EncodedCorpus, Vocabulary
from .errors import ValidationError

BOS = -1
EOS = -2

WORD_NGRAM, CLASS_NGRAM = "w", "c"
WORD_SKIP, CLASS_SKIP = "ws", "cs"
WORD_TIED, CLASS_TIED = "wsT", "csT"
KINDS = (WORD_NGRAM, CLASS_NGRAM, WORD_SKIP, CLASS_SKIP, WORD_TIED, CLASS_TIED)
WORD_KINDS = frozenset((WORD_NGRAM, WORD_SKIP, WORD_TIED))
_KIND_RANK = {k: i for i, k in enumerate(KINDS)}


def make_key(kind: str, symbols: Sequence[int], distance: int = 0) -> tuple:
    return (kind, distance, *symbols)


def split_key(key: tuple) -> tuple[str, tuple, int]:
    """Return ``(kind, symbols, distance)``."""
    return key[0], tuple(key[2:]), key[1]


def _parse_numbers(spec: str) -> list[int]:
    out = []
    for part in spec.split(","):
        part = part.strip()
        m = re.fullmatch(r"(\d+)(?:-(\d+))?", part)
        if not m:
            raise ValidationError(f"bad number list {spec!r}")
        lo = int(m.group(1))
        hi = int(m.group(2) or lo)
        if hi < lo:
            raise ValidationError(f"empty range {part!r}")
        out.extend(range(lo, hi + 1))
    return out


def _format_numbers(values) -> str:
    values = sorted(values)
    runs, start = [], None
    for i, v in enumerate(values):
        if start is None:
            start = v
        if i + 1 == len(values) or values[i + 1] != v + 1:
            runs.append(str(start) if start == v else f"{start}-{v}")
            start = None
    return ",".join(runs)


@dataclass(frozen=True)
class TemplateSet:
    word_ngram_orders: frozenset = frozenset()
    class_ngram_orders: frozenset = frozenset()
    word_skip_distances: frozenset = frozenset()
    class_skip_distances: frozenset = frozenset()
    tied_word_skip_range: Optional[tuple[int, int]] = None
    tied_class_skip_range: Optional[tuple[int, int]] = None
    use_boundaries: bool = False

    def __post_init__(self):
        for name in ("word_ngram_orders", "class_ngram_orders",
                     "word_skip_distances", "class_skip_distances"):
            object.__setattr__(self, name, frozenset(int(v) for v in getattr(self, name)))
        if any(g < 1 for g in self.word_ngram_orders | self.class_ngram_orders):
            raise ValidationError("n-gram orders must be >= 1")
        if any(k < 2 for k in self.word_skip_distances | self.class_skip_distances):
            raise ValidationError("skip distances must be >= 2")
        for rng, untied in ((self.tied_word_skip_range, self.word_skip_distances),
                            (self.tied_class_skip_range, self.class_skip_distances)):
            if rng is None:
                continue
            lo, hi = rng
            if lo < 2 or hi < lo:
                raise ValidationError(f"bad tied range {rng}")
            if untied & set(range(lo, hi + 1)):
                raise ValidationError("tied range overlaps untied skip distances")
        if not (self.word_ngram_orders or self.class_ngram_orders or self.word_skip_distances
                or self.class_skip_distances or self.tied_word_skip_range or self.tied_class_skip_range):
            raise ValidationError("template set is empty")
        streams = tuple(s for s in (
            (WORD_NGRAM, sorted(self.word_ngram_orders), WORD_SKIP, sorted(self.word_skip_distances),
             WORD_TIED, self.tied_word_skip_range, True),
            (CLASS_NGRAM, sorted(self.class_ngram_orders), CLASS_SKIP, sorted(self.class_skip_distances),
             CLASS_TIED, self.tied_class_skip_range, False),
        ) if s[1] or s[3] or s[5])
        object.__setattr__(self, "_streams", streams)

    @classmethod
    def parse(cls, text: str) -> "TemplateSet":
        """Parse e.g. ``"w:1-3;c:1-3;ws:2-5;wsT:6-9;b"`` (``b`` enables boundary symbols)."""
        fields = {}
        boundaries = False
        for item in text.split(";"):
            item = item.strip()
            if not item:
                continue
            if item == "b":
                boundaries = True
                continue
            kind, sep, nums = item.partition(":")
            kind = kind.strip()
            if not sep or kind not in KINDS:
                raise ValidationError(f"bad template item {item!r}")
            if kind in fields:
                raise ValidationError(f"template kind {kind!r} given twice")
            values = _parse_numbers(nums)
            if kind in (WORD_TIED, CLASS_TIED):
                lo, hi = min(values), max(values)
                if sorted(values) != list(range(lo, hi + 1)):
                    raise ValidationError(f"tied range must be contiguous: {item!r}")
                fields[kind] = (lo, hi)
            else:
                fields[kind] = frozenset(values)
        return cls(
            word_ngram_orders=fields.get(WORD_NGRAM, frozenset()),
            class_ngram_orders=fields.get(CLASS_NGRAM, frozenset()),
            word_skip_distances=fields.get(WORD_SKIP, frozenset()),
            class_skip_distances=fields.get(CLASS_SKIP, frozenset()),
            tied_word_skip_range=fields.get(WORD_TIED),
            tied_class_skip_range=fields.get(CLASS_TIED),
            use_boundaries=boundaries,
        )

    def __str__(self):
        items = []
        for kind, vals in ((WORD_NGRAM, self.word_ngram_orders), (CLASS_NGRAM, self.class_ngram_orders),
                           (WORD_SKIP, self.word_skip_distances), (CLASS_SKIP, self.class_skip_distances)):
            if vals:
                items.append(f"{kind}:{_format_numbers(vals)}")
        for kind, rng in ((WORD_TIED, self.tied_word_skip_range), (CLASS_TIED, self.tied_class_skip_range)):
            if rng:
                items.append(f"{kind}:{rng[0]}-{rng[1]}")
        if self.use_boundaries:
            items.append("b")
        return ";".join(items)

    @property
    def has_skips(self) -> bool:
        return bool(self.word_skip_distances or self.class_skip_distances
                    or self.tied_word_skip_range or self.tied_class_skip_range)

    @property
    def max_order(self) -> int:
        return max(self.word_ngram_orders | self.class_ngram_orders, default=0)


def iter_instances(words: Sequence[int], class_of: Sequence[int], templates: TemplateSet) -> Iterator[tuple]:
    """Yield the feature key of every template instantiation in a sentence, with repetition."""
    words = tuple(words)
    l = len(words)
    bnd = templates.use_boundaries
    # _streams: (ngram kind, orders, skip kind, distances, tied kind, tied range, is_word)
    for ng, orders, sk, dists, tk, trange, is_word in templates._streams:
        seq = words if is_word else tuple(class_of[w] for w in words)
        if orders:
            padded = (BOS, *seq, EOS) if bnd else seq
            n = len(padded)
            for g in orders:
                if g == 1:
                    for s in seq:
                        yield (ng, 0, s)
                    continue
                for s in range(n - g + 1):
                    yield (ng, 0, *padded[s:s + g])
        for k in dists:
            for i in range(l - k):
                yield (sk, k, seq[i], seq[i + k])
        if trange:
            lo, hi = trange
            for k in range(lo, hi + 1):
                for i in range(l - k):
                    yield (tk, lo, seq[i], seq[i + k])


def iter_hole_keys(words: Sequence[int], pos: int, class_of: Sequence[int],
                   templates: TemplateSet) -> Iterator[tuple]:
    """Yield, for every instantiation covering position ``pos``, its key with that slot set to None.

    Together with the completion tables of a ``FeatureIndex`` this gives the
    score of every candidate symbol at ``pos`` without re-extracting the sentence.
    """
    l = len(words)
    bnd = templates.use_boundaries
    # _streams: (ngram kind, orders, skip kind, distances, tied kind, tied range, is_word)
    for ng, orders, sk, dists, tk, trange, is_word in templates._streams:
        seq = tuple(words) if is_word else tuple(class_of[w] for w in words)
        if orders:
            padded = (BOS, *seq, EOS) if bnd else seq
            p = pos + 1 if bnd else pos
            n = len(padded)
            for g in orders:
                for s in range(max(0, p - g + 1), min(p, n - g) + 1):
                    yield (ng, 0, *padded[s:p], None, *padded[p + 1:s + g])
        for k in dists:
            if pos + k < l:
                yield (sk, k, None, seq[pos + k])
            if pos - k >= 0:
                yield (sk, k, seq[pos - k], None)
        if trange:
            lo, hi = trange
            for k in range(lo, hi + 1):
                if pos + k < l:
                    yield (tk, lo, None, seq[pos + k])
                if pos - k >= 0:
                    yield (tk, lo, seq[pos - k], None)


@dataclass
class FeatureVector:
    indices: np.ndarray
    counts: np.ndarray

    def __len__(self):
        return self.indices.size

    def __eq__(self, other):
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return np.array_equal(self.indices, other.indices) and np.array_equal(self.counts, other.counts)

    def as_dict(self) -> dict[int, int]:
        return dict(zip(self.indices.tolist(), self.counts.tolist()))


def _sort_key(key):
    return (_KIND_RANK[key[0]], len(key), key[1:])


@dataclass
class FeatureIndex:
    keys: list[tuple]
    key_to_param: dict = field(init=False, repr=False)
    _completions: Optional[dict] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.keys = [tuple(k) for k in self.keys]
        self.key_to_param = {k: i for i, k in enumerate(self.keys)}
        if len(self.key_to_param) != len(self.keys):
            raise ValidationError("duplicate feature keys")

    @property
    def d(self) -> int:
        return len(self.keys)

    def __len__(self):
        return len(self.keys)

    def __eq__(self, other):
        if not isinstance(other, FeatureIndex):
            return NotImplemented
        return self.keys == other.keys

    def get(self, key, default=None):
        return self.key_to_param.get(key, default)

    def completions(self) -> dict:
        """Map each hole key to ``(symbols, params)`` arrays of the indexed keys that fill it."""
        if self._completions is None:
            table = defaultdict(lambda: ([], []))
            for p, key in enumerate(self.keys):
                head, syms = key[:2], key[2:]
                for j, s in enumerate(syms):
                    if s < 0:
                        continue
                    hole = (*head, *syms[:j], None, *syms[j + 1:])
                    table[hole][0].append(s)
                    table[hole][1].append(p)
            self._completions = {h: (np.array(s, dtype=np.int64), np.array(p, dtype=np.int64))
                                 for h, (s, p) in table.items()}
        return self._completions


def build_index(corpus: EncodedCorpus, classes: ClassMap, templates: TemplateSet,
                cutoff: int = 0) -> FeatureIndex:
    """Index every key occurring more than ``cutoff`` times in the corpus."""
    counts = Counter()
    class_of = classes.class_of.tolist()
    for sent in corpus.sentences:
        counts.update(iter_instances(sent, class_of, templates))
    keys = sorted((k for k, c in counts.items() if c > cutoff), key=_sort_key)
    if not keys:
        raise ValidationError("feature index is empty (cutoff too high?)")
    return FeatureIndex(keys)


class Extractor:
    """Extraction and scoring bound to one (class map, templates, index) triple."""

    def __init__(self, classes: ClassMap, templates: TemplateSet, index: FeatureIndex):
        self.classes = classes
        self.templates = templates
        self.index = index
        self._class_of = classes.class_of.tolist()
        self._get = index.key_to_param.get

    def extract(self, sentence: Sequence[int]) -> FeatureVector:
        if len(sentence) < 1:
            raise ValidationError("sentence must contain at least one word")
        get = self._get
        counts = Counter()
        for key in iter_instances(sentence, self._class_of, self.templates):
            p = get(key)
            if p is not None:
                counts[p] += 1
        idx = sorted(counts)
        return FeatureVector(np.array(idx, dtype=np.int64), np.array([counts[i] for i in idx], dtype=np.int64))

    def score(self, sentence: Sequence[int], lam: Sequence[float]) -> float:
        """lambda . f(sentence); ``lam`` is best passed as a list for speed."""
        get = self._get
        total = 0.0
        for key in iter_instances(sentence, self._class_of, self.templates):
            p = get(key)
            if p is not None:
                total += lam[p]
        return total

    def local_scores(self, sentence: Sequence[int], pos: int, lam: np.ndarray,
                     vocab_size: int, cache: Optional[dict] = None) -> tuple[np.ndarray, np.ndarray]:
        """Scores of the features covering ``pos`` as a function of the symbol placed there.

        Returns ``(word_part, class_part)`` with shapes (V,) and (C,): the score of
        the sentence with word w at ``pos`` is const + word_part[w] + class_part[class(w)].
        ``cache`` maps hole keys to their completion values; it is only valid
        for the ``lam`` it was filled with.
        """
        comp = self.index.completions()
        if cache is None:
            cache = {}
        word_part = np.zeros(vocab_size)
        class_part = np.zeros(self.classes.num_classes)
        for hole in iter_hole_keys(sentence, pos, self._class_of, self.templates):
            hit = cache.get(hole)
            if hit is None:
                found = comp.get(hole)
                if found is None:
                    cache[hole] = hit = (False, None, None)
                else:
                    cache[hole] = hit = (hole[0] in WORD_KINDS, found[0], lam[found[1]])
            is_word, syms, vals = hit
            if syms is None:
                continue
            # symbols are distinct within one hole, so fancy-index += is safe
            if is_word:
                word_part[syms] += vals
            else:
                class_part[syms] += vals
        return word_part, class_part


    def local_scores_list(self, sentence: Sequence[int], pos: int, lam: Sequence[float],
                          vocab_size: int, cache: dict) -> tuple[list, list]:
        """``local_scores`` with plain lists, faster for tiny vocabularies.

        Uses its own cache entries (tagged "list") so it can share ``cache``
        with the array version.
        """
        comp = self.index.completions()
        word_part = [0.0] * vocab_size
        class_part = [0.0] * self.classes.num_classes
        for hole in iter_hole_keys(sentence, pos, self._class_of, self.templates):
            hit = cache.get(("list", hole))
            if hit is None:
                found = comp.get(hole)
                if found is None:
                    hit = (None, ())
                else:
                    hit = (hole[0] in WORD_KINDS, list(zip(found[0].tolist(), (lam[p] for p in found[1]))))
                cache[("list", hole)] = hit
            is_word, pairs = hit
            target = word_part if is_word else class_part
            for sym, v in pairs:
                target[sym] += v
        return word_part, class_part


def extract(sentence, classes: ClassMap, templates: TemplateSet, index: FeatureIndex) -> FeatureVector:
    return Extractor(classes, templates, index).extract(sentence)


def dot(fv: FeatureVector, lam) -> float:
    lam = np.asarray(lam, dtype=float)
    if fv.indices.size and (fv.indices.max() >= lam.size or fv.indices.min() < 0):
        raise IndexError(f"feature index {int(fv.indices.max())} out of range for d={lam.size}")
    return float(np.dot(fv.counts, lam[fv.indices]))


def _render_symbol(s: int, kind: str, vocab: Optional[Vocabulary]) -> str:
    if s == BOS:
        return "<s>"
    if s == EOS:
        return "</s>"
    if kind in WORD_KINDS and vocab is not None:
        return vocab.word(s)
    return str(s)


def dump_features(index: FeatureIndex, lam, vocab: Optional[Vocabulary] = None) -> str:
    """Text dump: ``kind<TAB>symbols<TAB>distance<TAB>param_index<TAB>lambda`` per feature."""
    lines = []
    for p, key in enumerate(index.keys):
        kind, syms, dist = split_key(key)
        rendered = " ".join(_render_symbol(s, kind, vocab) for s in syms)
        lines.append(f"{kind}\t{rendered}\t{dist}\t{p}\t{float(lam[p])!r}\n")
    return "".join(lines)
