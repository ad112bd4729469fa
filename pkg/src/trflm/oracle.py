"""Exact reference computations for tiny models.

Everything here scores sentences through dense lookup tables built from the
feature index, not through ``Extractor``, so it can serve as an independent
check on the extraction, sampling and training code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from .errors import BudgetExceededError, ValidationError
from .features import (BOS, CLASS_NGRAM, CLASS_SKIP, CLASS_TIED, EOS, WORD_KINDS, WORD_NGRAM, WORD_SKIP,
                       WORD_TIED, split_key)
from .model import TrfModel

DEFAULT_BUDGET = 10**7
_BLOCK = 1 << 16


class _Tables:
    """Per-template dense tables of lambda values and parameter ids.

    Alphabets are extended with BOS, EOS and PAD at indices n, n+1, n+2 where n
    is the number of words (or classes). Entries touching PAD stay empty.
    """

    def __init__(self, model: TrfModel, budget: int):
        self.model = model
        V, C = model.V, model.classes.num_classes
        self.size = {True: V + 3, False: C + 3}
        self.lifted_class = np.concatenate([model.classes.class_of, [C, C + 1, C + 2]])
        self.lam = {}
        self.param = {}
        for p, key in enumerate(model.index.keys):
            kind, syms, dist = split_key(key)
            is_word = kind in WORD_KINDS
            n = self.size[is_word] - 3
            ext = tuple(n if s == BOS else n + 1 if s == EOS else s for s in syms)
            tkey = (kind, len(syms) if kind in (WORD_NGRAM, CLASS_NGRAM) else dist)
            if tkey not in self.lam:
                shape = (self.size[is_word],) * len(syms)
                if math.prod(shape) > budget:
                    raise BudgetExceededError(f"dense table {tkey} needs {math.prod(shape)} cells")
                self.lam[tkey] = np.zeros(shape)
                self.param[tkey] = np.full(shape, -1, dtype=np.int64)
            self.lam[tkey][ext] += model.lam[p]
            self.param[tkey][ext] = p

    def windows(self, X: np.ndarray):
        """Yield (table key, list of column arrays) for every template window of sentences X (N, l)."""
        t = self.model.templates
        N, l = X.shape
        V, C = self.model.V, self.model.classes.num_classes
        for is_word, ng, orders, sk, dists, tk, trange in (
                (True, WORD_NGRAM, t.word_ngram_orders, WORD_SKIP, t.word_skip_distances, WORD_TIED,
                 t.tied_word_skip_range),
                (False, CLASS_NGRAM, t.class_ngram_orders, CLASS_SKIP, t.class_skip_distances, CLASS_TIED,
                 t.tied_class_skip_range)):
            seq = X if is_word else self.model.classes.class_of[X]
            n = V if is_word else C
            if t.use_boundaries:
                padded = np.concatenate([np.full((N, 1), n), seq, np.full((N, 1), n + 1)], axis=1)
            else:
                padded = seq
            for g in sorted(orders):
                if (ng, g) not in self.lam:
                    continue
                src = seq if g == 1 else padded
                for s in range(src.shape[1] - g + 1):
                    yield (ng, g), [src[:, s + j] for j in range(g)]
            for k in sorted(dists):
                if (sk, k) in self.lam:
                    for i in range(l - k):
                        yield (sk, k), [seq[:, i], seq[:, i + k]]
            if trange and (tk, trange[0]) in self.lam:
                for k in range(trange[0], trange[1] + 1):
                    for i in range(l - k):
                        yield (tk, trange[0]), [seq[:, i], seq[:, i + k]]

    def scores(self, X: np.ndarray) -> np.ndarray:
        out = np.zeros(X.shape[0])
        for tkey, cols in self.windows(X):
            out += self.lam[tkey][tuple(cols)]
        return out

    def accumulate_counts(self, X: np.ndarray, weights: np.ndarray, acc: np.ndarray):
        for tkey, cols in self.windows(X):
            p = self.param[tkey][tuple(cols)]
            hit = p >= 0
            acc += np.bincount(p[hit], weights=weights[hit], minlength=acc.size)


def _check_budget(V: int, l: int, budget: int):
    if V ** l > budget:
        raise BudgetExceededError(f"enumerating {V}^{l} sentences exceeds budget {budget}")


def sentence_blocks(V: int, l: int, block: int = _BLOCK):
    """All V**l sentences of length l, in lexicographic order, as (N, l) int arrays."""
    total = V ** l
    for start in range(0, total, block):
        idx = np.arange(start, min(start + block, total))
        yield np.stack(np.unravel_index(idx, (V,) * l), axis=1)


def enumerate_log_z(model: TrfModel, l: int, budget: int = DEFAULT_BUDGET, _tables=None) -> float:
    """log Z_l by brute force over all V**l sentences."""
    if l < 1:
        raise ValidationError("length must be >= 1")
    _check_budget(model.V, l, budget)
    tables = _tables or _Tables(model, budget)
    acc = -np.inf
    for X in sentence_blocks(model.V, l):
        acc = np.logaddexp(acc, logsumexp(tables.scores(X)))
    return float(acc)


def dp_log_z(model: TrfModel, l: int, budget: int = DEFAULT_BUDGET) -> float:
    """log Z_l by a forward recursion over (g-1)-symbol contexts; n-gram templates only."""
    t = model.templates
    if t.has_skips:
        raise ValidationError("dp_log_z requires n-gram-only templates")
    if l < 1:
        raise ValidationError("length must be >= 1")
    g = t.max_order
    ctx = max(g - 1, 1)
    V = model.V
    E = V + 3
    bos, eos, pad = V, V + 1, V + 2
    if E ** (ctx + 1) > budget:
        raise BudgetExceededError(f"DP potential needs {E ** (ctx + 1)} cells")
    tables = _Tables(model, budget)
    lift = tables.lifted_class

    # phi[s_1..s_ctx, y]: total weight of the n-grams ending at the new symbol y
    phi = np.zeros((E,) * (ctx + 1))
    for (kind, k), lam_table in tables.lam.items():
        table = lam_table if kind == WORD_NGRAM else lam_table[np.ix_(*([lift] * k))]
        if k == 1:
            table = table.copy()
            table[bos] = table[eos] = 0.0
        phi += table.reshape((1,) * (ctx + 1 - k) + (E,) * k)

    alpha = np.full((E,) * ctx, -np.inf)
    start = (pad,) * (ctx - 1) + ((bos,) if t.use_boundaries else (pad,))
    alpha[start] = 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        for _ in range(l):
            step = alpha[..., None] + phi[..., :V]
            nxt = logsumexp(step, axis=0)
            alpha = np.full((E,) * ctx, -np.inf)
            if ctx == 1:
                alpha[:V] = nxt
            else:
                alpha[..., :V] = nxt
        if t.use_boundaries:
            return float(logsumexp(alpha + phi[..., eos]))
        return float(logsumexp(alpha))


def exact_log_z(model: TrfModel, l: int, method: str = "auto", budget: int = DEFAULT_BUDGET) -> float:
    if method == "auto":
        method = "enumerate" if model.templates.has_skips else "dp"
    if method == "dp":
        return dp_log_z(model, l, budget)
    if method == "enumerate":
        return enumerate_log_z(model, l, budget)
    raise ValidationError(f"unknown method {method!r}")


def exact_log_zs(model: TrfModel, method: str = "auto", budget: int = DEFAULT_BUDGET,
                 lengths=None) -> np.ndarray:
    """log Z_l for l = 1..m (slot 0 is nan). Only supported lengths unless ``lengths`` is given."""
    out = np.full(model.m + 1, np.nan)
    if lengths is None:
        lengths = model.prior.support
    for l in lengths:
        out[l] = exact_log_z(model, int(l), method, budget)
    return out


def zeta_star(model: TrfModel, **kw) -> np.ndarray:
    """Exact log(Z_l / Z_1) for every l in 1..m."""
    log_z = exact_log_zs(model, lengths=range(1, model.m + 1), **kw)
    z = log_z - log_z[1]
    z[0] = 0.0
    return z


def exact_length_marginals(model: TrfModel, zeta: Optional[np.ndarray] = None, **kw) -> np.ndarray:
    """Marginal of l under the zeta mixture, normalized over lengths; slot 0 is 0."""
    zeta = model.zeta if zeta is None else np.asarray(zeta, dtype=float)
    log_z = exact_log_zs(model, **kw)
    log_z1 = exact_log_z(model, 1, **kw)
    logw = np.full(model.m + 1, -np.inf)
    for l in model.prior.support:
        logw[l] = math.log(model.prior.pi[l]) + log_z[l] - log_z1 - zeta[l]
    return np.exp(logw - logsumexp(logw))


def exact_sentences(model: TrfModel, l: int, budget: int = DEFAULT_BUDGET, _tables=None):
    """All sentences of length l with their exact conditional log-probabilities log p(x | l)."""
    _check_budget(model.V, l, budget)
    tables = _tables or _Tables(model, budget)
    X = np.concatenate(list(sentence_blocks(model.V, l)))
    s = tables.scores(X)
    return X, s - logsumexp(s)


def exact_feature_expectation(model: TrfModel, budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """E[f] under the exactly normalized model (each length weighted by pi_l)."""
    tables = _Tables(model, budget)
    acc = np.zeros(model.d)
    for l in model.prior.support:
        X, logp = exact_sentences(model, int(l), budget, tables)
        tables.accumulate_counts(X, model.prior.pi[l] * np.exp(logp), acc)
    return acc


def exact_target_table(model: TrfModel, zeta: Optional[np.ndarray] = None, budget: int = DEFAULT_BUDGET):
    """Every supported sentence and its probability under the normalized zeta mixture."""
    zeta = model.zeta if zeta is None else np.asarray(zeta, dtype=float)
    tables = _Tables(model, budget)
    sents, logw = [], []
    for l in model.prior.support:
        _check_budget(model.V, int(l), budget)
        X = np.concatenate(list(sentence_blocks(model.V, int(l))))
        logw.append(math.log(model.prior.pi[l]) - zeta[l] + tables.scores(X))
        sents.extend(map(tuple, X.tolist()))
    logw = np.concatenate(logw)
    return sents, np.exp(logw - logsumexp(logw))


def exact_sample(model: TrfModel, n: int, rng: np.random.Generator, budget: int = DEFAULT_BUDGET):
    """Draw n sentences from the exactly normalized model (lengths drawn from pi)."""
    tables = _Tables(model, budget)
    lengths = rng.choice(model.m + 1, size=n, p=model.prior.pi)
    per_len = {}
    out = []
    for l in lengths:
        l = int(l)
        if l not in per_len:
            X, logp = exact_sentences(model, l, budget, tables)
            per_len[l] = (X, np.exp(logp))
        X, p = per_len[l]
        out.append(tuple(X[rng.choice(len(p), p=p)].tolist()))
    return out


def exact_mean_log_likelihood(model: TrfModel, sentences, l2: float = 0.0, budget: int = DEFAULT_BUDGET):
    """Penalized mean log-likelihood under exact normalizers and its gradient in lambda.

    Objective: (1/n) sum_x [log pi_l + lambda.f(x) - log Z_l] - l2 * |lambda|^2.
    Every sentence length must be in the model's support.
    """
    tables = _Tables(model, budget)
    n = len(sentences)
    emp = np.zeros(model.d)
    total = 0.0
    by_len = {}
    for s in sentences:
        by_len.setdefault(len(s), []).append(s)
    exp_f = np.zeros(model.d)
    for l, group in by_len.items():
        X = np.array(group, dtype=np.int64)
        tables.accumulate_counts(X, np.ones(len(group)), emp)
        log_z = enumerate_log_z(model, l, budget, tables)
        total += tables.scores(X).sum() + len(group) * (math.log(model.prior.pi[l]) - log_z)
    # the data's own length frequencies; these equal pi on the training corpus
    for l, group in by_len.items():
        Xl, logp = exact_sentences(model, l, budget, tables)
        tables.accumulate_counts(Xl, len(group) / n * np.exp(logp), exp_f)
    value = total / n - l2 * float(model.lam @ model.lam)
    grad = emp / n - exp_f - 2.0 * l2 * model.lam
    return value, grad


def exact_ml_fit(model: TrfModel, sentences, l2: float = 0.0, tol: float = 1e-12,
                 budget: int = DEFAULT_BUDGET) -> TrfModel:
    """Reference maximum-likelihood fit with exact gradients (L-BFGS); zeta set to its exact value."""
    work = model.copy()

    def neg(lam):
        work.set_lambda(lam)
        v, g = exact_mean_log_likelihood(work, sentences, l2, budget)
        return -v, -g

    res = optimize.minimize(neg, model.lam.copy(), jac=True, method="L-BFGS-B",
                            options={"gtol": tol, "ftol": 1e-15, "maxiter": 10000})
    work.set_lambda(res.x)
    work.zeta = zeta_star(work, budget=budget)
    return work


@dataclass
class ExactSummary:
    log_z: np.ndarray
    zeta_star: np.ndarray
    expectations: np.ndarray
    length_marginals: np.ndarray

    def format(self) -> str:
        lines = ["length\tlog_Z\tzeta_star\tmarginal"]
        for l in range(1, self.log_z.size):
            lines.append(f"{l}\t{float(self.log_z[l])!r}\t{float(self.zeta_star[l])!r}\t{float(self.length_marginals[l])!r}")
        lines.append("param\texpectation")
        lines += [f"{p}\t{float(v)!r}" for p, v in enumerate(self.expectations)]
        return "\n".join(lines) + "\n"


def exact_summary(model: TrfModel, budget: int = DEFAULT_BUDGET) -> ExactSummary:
    log_z = exact_log_zs(model, lengths=range(1, model.m + 1), budget=budget)
    zs = log_z - log_z[1]
    zs[0] = 0.0
    return ExactSummary(log_z, zs, exact_feature_expectation(model, budget),
                        exact_length_marginals(model, budget=budget))
