"""Trans-dimensional MCMC over sentences of all lengths.

The kernel targets p(l, x) proportional to pi_l exp(lambda.f(x) - zeta_l). One
step is a Gibbs sweep over the positions of the current sentence followed by a
Metropolis-Hastings move between adjacent supported lengths that appends
words drawn from a smoothed unigram proposal or deletes the tail.
"""

from __future__ import annotations

import bisect
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import TrfModel


def seed_sequence(seed: int, stream: str, *extra: int) -> np.random.SeedSequence:
    """A named, reproducible random stream derived from one top-level seed."""
    return np.random.SeedSequence(entropy=seed, spawn_key=(zlib.crc32(stream.encode()), *extra))


@dataclass
class ChainState:
    sentence: list[int]
    cached_score: float
    rng: np.random.Generator
    stream: int = 0


@dataclass
class SampleBatch:
    samples: list[tuple[int, ...]]
    length_histogram: np.ndarray
    acceptance: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.samples)

    def acceptance_rates(self) -> dict:
        return {k: (a / n if n else float("nan")) for k, (a, n) in self.acceptance.items()}


class _Kernel:
    """Per-model quantities the kernel needs: proposal tables and the class layout."""

    def __init__(self, model: TrfModel):
        counts = np.asarray(model.vocab.counts, dtype=float) + 1.0
        self.q = counts / counts.sum()
        self.log_q = np.log(self.q)
        self.q_cdf = np.cumsum(self.q)
        self.log_q_list = self.log_q.tolist()
        self.q_cdf_list = self.q_cdf.tolist()
        self.support = [int(l) for l in model.prior.support]
        self.support_pos = {l: j for j, l in enumerate(self.support)}
        cls = model.classes.class_of
        self.class_of = cls
        self.order = np.argsort(cls, kind="stable")
        sorted_cls = cls[self.order]
        self.nonempty = np.unique(sorted_cls)
        self.starts = np.searchsorted(sorted_cls, self.nonempty)
        self.ends = np.append(self.starts[1:], cls.size)
        # plain lists for the small-vocabulary fast path
        self.small = cls.size <= _SMALL
        self.members = [self.order[a:b].tolist() for a, b in zip(self.starts, self.ends)]
        self.nonempty_list = self.nonempty.tolist()
        self.class_list = cls.tolist()


_SMALL = 32


def _kernel(model: TrfModel) -> _Kernel:
    k = model.__dict__.get("_kernel")
    if k is None:
        k = model.__dict__["_kernel"] = _Kernel(model)
    return k


def _draw_list(rng: np.random.Generator, weights: list) -> int:
    """Index drawn proportionally to a list of unnormalized weights (first index whose cdf exceeds u)."""
    u = rng.random() * sum(weights)
    acc = 0.0
    for i, w in enumerate(weights):
        acc += w
        if u < acc:
            return i
    return len(weights) - 1


def _draw(rng: np.random.Generator, p: np.ndarray) -> int:
    """Index drawn proportionally to the unnormalized weights p."""
    if p.size <= _SMALL:
        return _draw_list(rng, p.tolist())
    cdf = np.cumsum(p)
    return min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), p.size - 1)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def _conditional_parts(sentence: Sequence[int], pos: int, model: TrfModel):
    """Class-level and within-class pieces of p(x_pos | rest)."""
    k = _kernel(model)
    word_part, class_part = model.extractor.local_scores(sentence, pos, model.lam, model.V,
                                                               model.local_cache)
    within = word_part[k.order]
    # log sum_{w in c} exp(word_part[w]) for every non-empty class c
    class_mass = np.logaddexp.reduceat(within, k.starts)
    class_logw = class_part[k.nonempty] + class_mass
    return k, word_part, class_part, within, class_logw


def gibbs_conditional(sentence: Sequence[int], pos: int, model: TrfModel) -> np.ndarray:
    """p(x_pos = w | rest) for every word w, assembled as P(class) * P(word | class)."""
    k, word_part, _, within, class_logw = _conditional_parts(sentence, pos, model)
    p_class = _softmax(class_logw)
    out = np.zeros(model.V)
    for c, (a, b) in enumerate(zip(k.starts, k.ends)):
        out[k.order[a:b]] = p_class[c] * _softmax(within[a:b])
    return out


def _small_position(k: _Kernel, word_part: list, class_part: list, rng: np.random.Generator) -> int:
    """Class-then-word draw in pure Python; same distribution as the array path."""
    exp = math.exp
    per_class = []
    for members in k.members:
        vals = [word_part[w] for w in members]
        top = max(vals)
        per_class.append((top, [exp(v - top) for v in vals]))
    logw = [class_part[c] + top + math.log(sum(ws)) for c, (top, ws) in zip(k.nonempty_list, per_class)]
    top = max(logw)
    c = _draw_list(rng, [exp(v - top) for v in logw])
    return k.members[c][_draw_list(rng, per_class[c][1])]


def gibbs_sweep(state: ChainState, model: TrfModel) -> ChainState:
    """Resample every position in turn, class first, then the word within the class."""
    sent = state.sentence
    rng = state.rng
    k = _kernel(model)
    for pos in range(len(sent)):
        if k.small:
            word_part, class_part = model.extractor.local_scores_list(sent, pos, model._lam_list, model.V,
                                                                      model.local_cache)
            w = _small_position(k, word_part, class_part, rng)
        else:
            k, word_part, class_part, within, class_logw = _conditional_parts(sent, pos, model)
            c = _draw(rng, np.exp(class_logw - class_logw.max()))
            a, b = k.starts[c], k.ends[c]
            seg = within[a:b]
            w = int(k.order[a + _draw(rng, np.exp(seg - seg.max()))])
        old = sent[pos]
        if w != old:
            state.cached_score += (word_part[w] + class_part[k.class_of[w]]
                                   - word_part[old] - class_part[k.class_of[old]])
            sent[pos] = w
    return state


def _move_probs(k: _Kernel, l: int) -> tuple[float, float]:
    """(P(propose longer), P(propose shorter)) from length l, reflected at the support ends."""
    j = k.support_pos[l]
    last = len(k.support) - 1
    if last == 0:
        return 0.0, 0.0
    if j == 0:
        return 1.0, 0.0
    if j == last:
        return 0.0, 1.0
    return 0.5, 0.5


def log_accept_ratio(sentence: Sequence[int], proposed: Sequence[int], model: TrfModel,
                     score: Optional[float] = None, proposed_score: Optional[float] = None) -> float:
    """log of the Metropolis-Hastings ratio for a tail birth/death move between adjacent supported lengths."""
    k = _kernel(model)
    l, l2 = len(sentence), len(proposed)
    score = model.score(sentence) if score is None else score
    proposed_score = model.score(proposed) if proposed_score is None else proposed_score
    up, down = _move_probs(k, l)
    up2, down2 = _move_probs(k, l2)
    pi, zeta = model.prior.pi, model.zeta
    target = (math.log(pi[l2]) - math.log(pi[l])) + (zeta[l] - zeta[l2]) + (proposed_score - score)
    log_q = k.log_q_list
    if l2 > l:
        return target + math.log(down2) - math.log(up) - sum(log_q[w] for w in proposed[l:])
    return target + math.log(up2) - math.log(down) + sum(log_q[w] for w in sentence[l2:])


def length_jump(state: ChainState, model: TrfModel, stats: Optional[dict] = None) -> ChainState:
    k = _kernel(model)
    sent = state.sentence
    l = len(sent)
    up, down = _move_probs(k, l)
    if up == 0.0 and down == 0.0:
        return state
    rng = state.rng
    j = k.support_pos[l]
    grow = up == 1.0 or (down != 1.0 and rng.random() < up)
    if grow:
        l2 = k.support[j + 1]
        cdf = k.q_cdf_list
        tail = [min(bisect.bisect_right(cdf, rng.random() * cdf[-1]), model.V - 1) for _ in range(l2 - l)]
        proposed = sent + tail
        move = "birth"
    else:
        proposed = sent[:k.support[j - 1]]
        move = "death"
    new_score = model.score(proposed)
    log_a = log_accept_ratio(sent, proposed, model, state.cached_score, new_score)
    accept = rng.random() < math.exp(min(0.0, log_a))
    if stats is not None:
        rec = stats.setdefault(move, [0, 0])
        rec[0] += accept
        rec[1] += 1
    if accept:
        state.sentence = proposed
        state.cached_score = new_score
    return state


def jump_transitions(sentence: Sequence[int], model: TrfModel) -> list[tuple[tuple, float]]:
    """Every destination of ``length_jump`` from ``sentence`` with its probability (tiny V only)."""
    import itertools

    k = _kernel(model)
    sentence = tuple(sentence)
    l = len(sentence)
    up, down = _move_probs(k, l)
    out = []
    stay = 1.0
    if up > 0:
        l2 = k.support[k.support_pos[l] + 1]
        for tail in itertools.product(range(model.V), repeat=l2 - l):
            prop = sentence + tail
            p = up * float(np.prod(k.q[list(tail)])) * math.exp(min(0.0, log_accept_ratio(sentence, prop, model)))
            out.append((prop, p))
            stay -= p
    if down > 0:
        prop = sentence[:k.support[k.support_pos[l] - 1]]
        p = down * math.exp(min(0.0, log_accept_ratio(sentence, prop, model)))
        out.append((prop, p))
        stay -= p
    out.append((sentence, stay))
    return out


def step(state: ChainState, model: TrfModel, stats: Optional[dict] = None) -> ChainState:
    gibbs_sweep(state, model)
    return length_jump(state, model, stats)


def init_chains(model: TrfModel, n_chains: int, seed: int, stream: str = "sampler") -> list[ChainState]:
    """Independent chains, each with its own random stream; start lengths drawn from pi."""
    k = _kernel(model)
    chains = []
    for i in range(n_chains):
        rng = np.random.Generator(np.random.PCG64(seed_sequence(seed, stream, i)))
        l = k.support[_draw(rng, model.prior.pi[k.support])]
        sent = [_draw(rng, k.q) for _ in range(l)]
        chains.append(ChainState(sent, model.score(sent), rng, stream=i))
    return chains


def _run_chain(chain: ChainState, model: TrfModel, n: int, sweeps: int):
    chain.cached_score = model.score(chain.sentence)
    stats, out = {}, []
    for _ in range(n):
        for _ in range(sweeps):
            step(chain, model, stats)
        out.append(tuple(chain.sentence))
    return out, stats


def draw_batch(chains: list[ChainState], model: TrfModel, K: int, sweeps_per_draw: int = 1,
               threads: int = 1) -> SampleBatch:
    """K samples taken round-robin over the chains (sample j from chain j mod n_chains).

    Chains are advanced independently, so the batch does not depend on ``threads``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    n = len(chains)
    quota = [K // n + (1 if c < K % n else 0) for c in range(n)]
    jobs = [(chains[c], model, quota[c], sweeps_per_draw) for c in range(n)]
    if threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda job: _run_chain(*job), jobs))
    else:
        results = [_run_chain(*job) for job in jobs]
    samples = [results[j % n][0][j // n] for j in range(K)]
    hist = np.bincount([len(s) for s in samples], minlength=model.m + 1)
    acceptance = {}
    for _, stats in results:
        for move, (a, t) in stats.items():
            rec = acceptance.setdefault(move, [0, 0])
            rec[0] += a
            rec[1] += t
    return SampleBatch(samples, hist, acceptance)
