"""Perplexity, n-best rescoring, model combination and WER/CER scoring."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .corpus import EncodedCorpus
from .errors import OutOfSupportError, TrfError, ValidationError
from .fileio import atomic_write
from .model import TrfModel

logger = logging.getLogger(__name__)

SCHEMES = ("W", "S", "Log")


class SchemeError(ValidationError):
    pass


# --------------------------------------------------------------------------
# perplexity


@dataclass
class PerplexityResult:
    ppl: float
    log_prob: float
    tokens: int
    sentences: int
    excluded: int = 0


def ppl_from_log_prob(total_log_prob: float, n_words: int, n_sentences: int) -> float:
    """exp(-log p / T) with T counting every word plus one end-of-sentence event per sentence."""
    return math.exp(-total_log_prob / (n_words + n_sentences))


def perplexity(model: TrfModel, corpus: EncodedCorpus | Sequence[Sequence[int]]) -> PerplexityResult:
    sentences = corpus.sentences if isinstance(corpus, EncodedCorpus) else corpus
    total, words, n, excluded = 0.0, 0, 0, 0
    for s in sentences:
        try:
            total += model.log_prob_joint(s)
        except OutOfSupportError:
            excluded += 1
            continue
        words += len(s)
        n += 1
    if excluded:
        logger.warning("perplexity: %d sentences with unsupported length excluded", excluded)
    if n == 0:
        raise ValidationError("no sentence with a supported length")
    return PerplexityResult(ppl_from_log_prob(total, words, n), total, words + n, n, excluded)


# --------------------------------------------------------------------------
# combination


@dataclass(frozen=True)
class CombinationConfig:
    scheme: str
    alpha: float

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise SchemeError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise SchemeError(f"alpha={self.alpha} outside [0, 1]")


def _log_mix(alpha: float, a: float, b: float) -> float:
    """log(alpha e^a + (1 - alpha) e^b), exact at the endpoints."""
    if alpha == 1.0:
        return a
    if alpha == 0.0:
        return b
    return float(np.logaddexp(math.log(alpha) + a, math.log1p(-alpha) + b))


def combine(scheme: str, alpha: float, s1, s2) -> float:
    """Combined sentence log-score.

    W takes per-word conditional log-probabilities (sequences); S and Log take
    sentence log-probabilities (floats).
    """
    CombinationConfig(scheme, alpha)
    if scheme == "W":
        if np.ndim(s1) != 1 or np.ndim(s2) != 1:
            raise SchemeError("the W scheme needs per-word conditionals from both models")
        if len(s1) != len(s2):
            raise SchemeError("per-word score sequences differ in length")
        return float(sum(_log_mix(alpha, a, b) for a, b in zip(s1, s2)))
    if np.ndim(s1) != 0 or np.ndim(s2) != 0:
        raise SchemeError(f"the {scheme} scheme takes sentence-level log-probabilities")
    s1, s2 = float(s1), float(s2)
    if scheme == "S":
        return _log_mix(alpha, s1, s2)
    if alpha == 1.0:
        return s1
    if alpha == 0.0:
        return s2
    return alpha * s1 + (1.0 - alpha) * s2


# --------------------------------------------------------------------------
# n-best lists and score tables


@dataclass
class NBestSet:
    """utterance id -> hypotheses (token lists), in file order."""

    hyps: dict[str, list[list[str]]]

    def __iter__(self):
        return iter(self.hyps.items())

    def __len__(self):
        return len(self.hyps)

    @classmethod
    def read(cls, path) -> "NBestSet":
        hyps: dict[str, dict[int, list[str]]] = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) not in (2, 3):
                    raise TrfError(f"{path}:{lineno}: expected 'uttid<TAB>hyp_index<TAB>tokens'")
                utt, idx = parts[0], int(parts[1])
                tokens = parts[2].split() if len(parts) == 3 else []
                per = hyps.setdefault(utt, {})
                if idx in per:
                    raise TrfError(f"{path}:{lineno}: duplicate hypothesis {utt}/{idx}")
                per[idx] = tokens
        out = {}
        for utt, per in hyps.items():
            if sorted(per) != list(range(len(per))):
                raise TrfError(f"{path}: hypothesis indices of {utt} are not dense 0..H-1")
            out[utt] = [per[i] for i in range(len(per))]
        return cls(out)

    def format(self) -> str:
        return "".join(f"{utt}\t{i}\t{' '.join(h)}\n" for utt, hs in self.hyps.items() for i, h in enumerate(hs))


@dataclass
class ScoreTable:
    """(utterance id, hypothesis index) -> natural-log sentence score, plus optional per-word scores."""

    sentence: dict[tuple[str, int], float] = field(default_factory=dict)
    words: dict[tuple[str, int], list[float]] = field(default_factory=dict)

    def validate(self, tol: float = 1e-6):
        for key, v in self.sentence.items():
            if not math.isfinite(v):
                raise ValidationError(f"non-finite score for {key}")
        for key, ws in self.words.items():
            if key in self.sentence and abs(sum(ws) - self.sentence[key]) > tol:
                raise ValidationError(f"per-word scores of {key} do not sum to the sentence score")

    @property
    def has_words(self) -> bool:
        return bool(self.words) and set(self.words) >= set(self.sentence)

    @classmethod
    def read(cls, path) -> "ScoreTable":
        table = cls()
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) not in (3, 4):
                    raise TrfError(f"{path}:{lineno}: expected 'uttid<TAB>hyp_index<TAB>logprob[<TAB>word logprobs]'")
                key = (parts[0], int(parts[1]))
                table.sentence[key] = float(parts[2])
                if len(parts) == 4:
                    table.words[key] = [float(x) for x in parts[3].split()]
        table.validate()
        return table

    def format(self) -> str:
        out = []
        for key, v in self.sentence.items():
            row = f"{key[0]}\t{key[1]}\t{float(v)!r}"
            if key in self.words:
                row += "\t" + " ".join(repr(float(x)) for x in self.words[key])
            out.append(row + "\n")
        return "".join(out)

    def write(self, path):
        atomic_write(path, self.format())


def score_nbest(model: TrfModel, nbest: NBestSet) -> tuple[ScoreTable, list[tuple[str, int]]]:
    """TRF log-probabilities of every hypothesis; unsupported lengths are left out and listed."""
    table, skipped = ScoreTable(), []
    for utt, hyps in nbest:
        for i, tokens in enumerate(hyps):
            try:
                table.sentence[(utt, i)] = model.log_prob_joint(model.vocab.encode(tokens))
            except OutOfSupportError:
                skipped.append((utt, i))
    return table, skipped


def combine_tables(scheme: str, alpha: float, t1: ScoreTable, t2: ScoreTable) -> ScoreTable:
    if scheme == "W" and not (t1.has_words and t2.has_words):
        raise SchemeError("the W scheme is not applicable: both models must provide per-word "
                          "conditionals (sentence-only scores, e.g. from a TRF, cannot be combined this way)")
    out = ScoreTable()
    for key, v1 in t1.sentence.items():
        if key not in t2.sentence:
            raise ValidationError(f"second score table lacks {key}")
        if scheme == "W":
            out.sentence[key] = combine("W", alpha, t1.words[key], t2.words[key])
        else:
            out.sentence[key] = combine(scheme, alpha, v1, t2.sentence[key])
    return out


def rescore(nbest: NBestSet, scores: ScoreTable) -> dict[str, int]:
    """Best hypothesis per utterance; ties go to the lowest index."""
    best = {}
    for utt, hyps in nbest:
        top, top_score = None, -math.inf
        for i in range(len(hyps)):
            try:
                s = scores.sentence[(utt, i)]
            except KeyError:
                raise ValidationError(f"missing score for {utt}/{i}") from None
            if top is None or s > top_score:
                top, top_score = i, s
        best[utt] = top
    return best


# --------------------------------------------------------------------------
# edit distance and error rates


@dataclass(frozen=True)
class EditResult:
    distance: int
    substitutions: int
    deletions: int
    insertions: int


def edit_distance(ref: Sequence, hyp: Sequence) -> EditResult:
    """Unit-cost Levenshtein alignment; traceback prefers substitution/match, then deletion, then insertion."""
    n, m = len(ref), len(hyp)
    d = [list(range(m + 1))]
    for i in range(1, n + 1):
        r = ref[i - 1]
        prev, row = d[i - 1], [i] + [0] * m
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (r != hyp[j - 1]), prev[j] + 1, row[j - 1] + 1)
        d.append(row)
    i, j, sub, dele, ins = n, m, 0, 0, 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditResult(d[n][m], sub, dele, ins)


def _units(tokens: Sequence[str], unit: str) -> list[str]:
    if unit == "word":
        return list(tokens)
    if unit == "char":
        return [c for tok in tokens for c in tok]
    raise ValidationError(f"unknown unit {unit!r}")


@dataclass
class ErrorReport:
    rate: float
    errors: int
    ref_tokens: int
    substitutions: int
    deletions: int
    insertions: int
    per_utterance: dict[str, EditResult]

    def format(self, unit: str = "word") -> str:
        name = "WER" if unit == "word" else "CER"
        lines = [f"{name}\t{float(self.rate)!r}", f"errors\t{self.errors}", f"ref_tokens\t{self.ref_tokens}",
                 f"substitutions\t{self.substitutions}", f"deletions\t{self.deletions}",
                 f"insertions\t{self.insertions}", "uttid\tdistance\tsub\tdel\tins"]
        for utt, r in self.per_utterance.items():
            lines.append(f"{utt}\t{r.distance}\t{r.substitutions}\t{r.deletions}\t{r.insertions}")
        return "\n".join(lines) + "\n"


def error_rate(refs: Mapping[str, Sequence[str]], hyps: Mapping[str, Sequence[str]],
               unit: str = "word") -> ErrorReport:
    """Corpus-level WER (unit='word') or CER (unit='char'): total edits / total reference units."""
    per, tot, ref_n = {}, [0, 0, 0, 0], 0
    for utt, ref in refs.items():
        if utt not in hyps:
            raise ValidationError(f"no hypothesis for utterance {utt}")
        r = edit_distance(_units(ref, unit), _units(hyps[utt], unit))
        per[utt] = r
        ref_n += len(_units(ref, unit))
        for k, v in enumerate((r.distance, r.substitutions, r.deletions, r.insertions)):
            tot[k] += v
    if ref_n == 0:
        raise ValidationError("references contain no tokens")
    return ErrorReport(tot[0] / ref_n, tot[0], ref_n, tot[1], tot[2], tot[3], per)


def read_references(path) -> dict[str, list[str]]:
    refs = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            utt, _, text = line.partition("\t")
            if utt in refs:
                raise TrfError(f"{path}:{lineno}: duplicate utterance {utt}")
            refs[utt] = text.split()
    return refs


def format_references(refs: Mapping[str, Sequence[str]]) -> str:
    return "".join(f"{utt}\t{' '.join(toks)}\n" for utt, toks in refs.items())


def selected_hypotheses(nbest: NBestSet, choice: Mapping[str, int]) -> dict[str, list[str]]:
    return {utt: nbest.hyps[utt][i] for utt, i in choice.items()}


# --------------------------------------------------------------------------
# interpolation weight tuning


def alpha_grid(step: float) -> list[float]:
    if not 0 < step <= 1:
        raise ValidationError("grid step must lie in (0, 1]")
    n = int(math.floor(1.0 / step + 1e-9))
    grid = [round(i * step, 12) for i in range(n + 1)]
    if grid[-1] < 1.0:
        grid.append(1.0)
    return grid


def tune_alpha(nbest: NBestSet, dev_refs: Mapping[str, Sequence[str]], s1: ScoreTable, s2: ScoreTable,
               scheme: str = "Log", grid_step: float = 0.01, unit: str = "word") -> tuple[float, list]:
    """Grid-search alpha for the lowest dev error rate; ties go to the smallest alpha.

    Returns the chosen alpha and the (alpha, error rate) curve.
    """
    missing = [utt for utt in nbest.hyps if utt not in dev_refs]
    if missing:
        raise ValidationError(f"missing references for {len(missing)} utterances, e.g. {missing[0]}")
    refs = {utt: dev_refs[utt] for utt in nbest.hyps}
    best_alpha, best_rate, curve = None, math.inf, []
    for alpha in alpha_grid(grid_step):
        choice = rescore(nbest, combine_tables(scheme, alpha, s1, s2))
        rate = error_rate(refs, selected_hypotheses(nbest, choice), unit).rate
        curve.append((alpha, rate))
        if rate < best_rate:
            best_alpha, best_rate = alpha, rate
    return best_alpha, curve
