"""The trans-dimensional random field: scores, the exact length-1 normalizer and joint log-probabilities."""

from __future__ import annotations

import hashlib
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.special import logsumexp

from .corpus import ClassMap, LengthPrior, Vocabulary
from .errors import ModelFormatError, OutOfSupportError, ValidationError
from .features import Extractor, FeatureIndex, FeatureVector, TemplateSet, split_key
from .fileio import atomic_write

FORMAT_HEADER = "TRF v1"


def default_zeta(m: int, vocab_size: int) -> np.ndarray:
    """(l - 1) log V: the exact log ratio Z_l / Z_1 of the all-zero, boundary-free model."""
    zeta = np.zeros(m + 1)
    zeta[1:] = np.arange(m) * math.log(vocab_size)
    return zeta


class TrfModel:
    """Holds lambda, zeta (indexed by length, slot 0 unused, zeta[1] = 0) and the length prior.

    ``log_z1`` is recomputed whenever lambda is committed through ``set_lambda``;
    never mutate ``lam`` in place.
    """

    def __init__(self, vocab: Vocabulary, classes: ClassMap, templates: TemplateSet,
                 index: FeatureIndex, prior: LengthPrior, lam=None, zeta=None):
        if classes.class_of.size != len(vocab):
            raise ValidationError("class map does not cover the vocabulary")
        self.vocab = vocab
        self.classes = classes
        self.templates = templates
        self.index = index
        self.prior = prior
        self.extractor = Extractor(classes, templates, index)
        self._single = None
        self.zeta = default_zeta(prior.m, len(vocab)) if zeta is None else np.array(zeta, dtype=float)
        if self.zeta.shape != (prior.m + 1,):
            raise ValidationError(f"zeta must have shape ({prior.m + 1},)")
        self.set_lambda(np.zeros(index.d) if lam is None else lam)

    @property
    def m(self) -> int:
        return self.prior.m

    @property
    def d(self) -> int:
        return self.index.d

    @property
    def V(self) -> int:
        return len(self.vocab)

    def set_lambda(self, lam):
        lam = np.array(lam, dtype=float)
        if lam.shape != (self.index.d,):
            raise ValidationError(f"lambda must have shape ({self.index.d},)")
        if not np.isfinite(lam).all():
            raise ValidationError("lambda has non-finite entries")
        self.lam = lam
        self._lam_list = lam.tolist()
        # hole key -> completion values under the current lambda (see Extractor.local_scores)
        self.local_cache = {}
        self.log_z1 = self.compute_log_z1()

    def single_word_features(self) -> sparse.csr_matrix:
        """V x d matrix of the feature counts of every one-word sentence."""
        if self._single is None:
            rows, cols, vals = [], [], []
            for w in range(self.V):
                fv = self.extractor.extract((w,))
                rows.extend([w] * len(fv))
                cols.extend(fv.indices.tolist())
                vals.extend(fv.counts.tolist())
            self._single = sparse.csr_matrix((vals, (rows, cols)), shape=(self.V, self.d), dtype=float)
        return self._single

    def compute_log_z1(self) -> float:
        return float(logsumexp(self.single_word_features() @ self.lam))

    def features(self, sentence: Sequence[int]) -> FeatureVector:
        return self.extractor.extract(sentence)

    def score(self, sentence: Sequence[int]) -> float:
        """lambda . f(sentence), the log of the unnormalized potential."""
        l = len(sentence)
        if not 1 <= l <= self.m:
            raise OutOfSupportError(l, f"sentence length {l} outside 1..{self.m}")
        return self.extractor.score(sentence, self._lam_list)

    def in_support(self, l: int) -> bool:
        return 1 <= l <= self.m and self.prior.counts[l] > 0

    def log_weight(self, sentence: Sequence[int], score: Optional[float] = None) -> float:
        """Unnormalized log weight under the zeta mixture: log pi_l + score - zeta_l."""
        l = len(sentence)
        if not self.in_support(l):
            raise OutOfSupportError(l)
        if score is None:
            score = self.score(sentence)
        return float(math.log(self.prior.pi[l]) + score - self.zeta[l])

    def log_prob_joint(self, sentence: Sequence[int]) -> float:
        """log p(l, x) = log pi_l + lambda.f(x) - log Z_1 - zeta_l.

        Raises OutOfSupportError for lengths with zero prior probability.
        """
        return self.log_weight(sentence) - self.log_z1

    def copy(self) -> "TrfModel":
        other = TrfModel.__new__(TrfModel)
        other.__dict__.update(self.__dict__)
        other.zeta = self.zeta.copy()
        other.lam = self.lam.copy()
        other._lam_list = list(self._lam_list)
        other.local_cache = {}
        return other

    def save(self, path, state_lines: Sequence[str] = ()):
        atomic_write(path, serialize(self, state_lines))

    @classmethod
    def load(cls, path) -> "TrfModel":
        return read_model_file(path)[0]


def _checksum(body: str) -> str:
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def serialize(model: TrfModel, state_lines: Sequence[str] = ()) -> str:
    if model.d == 0:
        raise ValidationError("refusing to save a model without features")
    if model.zeta[1] != 0.0:
        raise ValidationError("zeta[1] must be 0")
    out = [FORMAT_HEADER]
    meta = [("m", model.m), ("d", model.d), ("V", model.V), ("C", model.classes.num_classes),
            ("templates", str(model.templates)), ("unk_id", model.vocab.unk_id), ("n", model.prior.total)]
    out += [f"meta\t{k}\t{v}" for k, v in meta]
    for i, (w, c) in enumerate(zip(model.vocab.words, model.vocab.counts)):
        out.append(f"word\t{i}\t{w}\t{c}\t{int(model.classes.class_of[i])}")
    for l in range(1, model.m + 1):
        out.append(f"pi\t{l}\t{float(model.prior.pi[l])!r}")
    for l in range(1, model.m + 1):
        out.append(f"zeta\t{l}\t{float(model.zeta[l])!r}")
    for p, key in enumerate(model.index.keys):
        kind, syms, dist = split_key(key)
        out.append(f"feat\t{kind}\t{' '.join(map(str, syms))}\t{dist}\t{float(model.lam[p])!r}")
    out.extend(state_lines)
    body = "\n".join(out) + "\n"
    return body + f"checksum\t{_checksum(body)}\n"


def read_model_file(path) -> tuple[TrfModel, list[list[str]]]:
    """Load a model or checkpoint; returns the model and the raw ``state``/``chain`` records."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"cannot read {path}: {exc}") from exc
    body, sep, trailer = text.rpartition("checksum\t")
    if not sep or not trailer.endswith("\n"):
        raise ModelFormatError(f"{path}: missing checksum trailer (truncated file?)")
    if trailer.strip() != _checksum(body):
        raise ModelFormatError(f"{path}: checksum mismatch")
    lines = body.split("\n")
    if lines[0] != FORMAT_HEADER:
        raise ModelFormatError(f"{path}: unsupported header {lines[0]!r}, expected {FORMAT_HEADER!r}")
    meta, words, counts, cls, pi, zeta, keys, lam, state = {}, [], [], [], {}, {}, [], [], []
    try:
        for line in lines[1:]:
            if not line:
                continue
            rec = line.split("\t")
            tag = rec[0]
            if tag == "meta":
                meta[rec[1]] = rec[2]
            elif tag == "word":
                words.append(rec[2])
                counts.append(int(rec[3]))
                cls.append(int(rec[4]))
            elif tag == "pi":
                pi[int(rec[1])] = float(rec[2])
            elif tag == "zeta":
                zeta[int(rec[1])] = float(rec[2])
            elif tag == "feat":
                syms = tuple(int(s) for s in rec[2].split())
                keys.append((rec[1], int(rec[3]), *syms))
                lam.append(float(rec[4]))
            else:
                state.append(rec)
        m, n = int(meta["m"]), int(meta["n"])
        vocab = Vocabulary(words, counts, unk_id=int(meta["unk_id"]))
        classes = ClassMap(cls, int(meta["C"]))
        templates = TemplateSet.parse(meta["templates"])
        length_counts = [0] + [int(round(pi[l] * n)) for l in range(1, m + 1)]
        prior = LengthPrior(length_counts)
        if any(prior.pi[l] != pi[l] for l in range(1, m + 1)):
            raise ModelFormatError(f"{path}: length prior inconsistent with n={n}")
        z = np.array([0.0] + [zeta[l] for l in range(1, m + 1)])
        if len(keys) != int(meta["d"]) or len(words) != int(meta["V"]):
            raise ModelFormatError(f"{path}: record counts disagree with header")
        model = TrfModel(vocab, classes, templates, FeatureIndex(keys), prior, lam=lam, zeta=z)
    except (KeyError, IndexError, ValueError) as exc:
        raise ModelFormatError(f"{path}: malformed model file: {exc}") from exc
    return model, state
