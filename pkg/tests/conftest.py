import itertools

import numpy as np
import pytest

from trflm.corpus import ClassMap, EncodedCorpus, LengthPrior, Vocabulary, frequency_buckets
from trflm.features import FeatureIndex, TemplateSet, build_index
from trflm.model import TrfModel


def all_sentences(V, m):
    return [s for l in range(1, m + 1) for s in itertools.product(range(V), repeat=l)]


def make_tiny(V=3, m=3, templates="w:1-2", C=2, seed=0, length_counts=None, lam_scale=1.0,
              random_zeta=True):
    """A model whose index holds every feature occurring in any sentence up to length m."""
    rng = np.random.default_rng(seed)
    vocab = Vocabulary(["<unk>"] + [f"w{i}" for i in range(1, V)], [int(c) for c in rng.integers(1, 9, V)])
    classes = ClassMap(frequency_buckets(vocab.counts, C), C)
    t = TemplateSet.parse(templates)
    index = build_index(EncodedCorpus(all_sentences(V, m), m), classes, t)
    if length_counts is None:
        length_counts = rng.integers(1, 6, size=m)
    prior = LengthPrior([0] + [int(c) for c in length_counts])
    model = TrfModel(vocab, classes, t, index, prior, lam=rng.uniform(-lam_scale, lam_scale, index.d))
    if random_zeta:
        model.zeta = np.concatenate([[0.0, 0.0], rng.uniform(-1, 1, m - 1)])
    return model


@pytest.fixture
def tiny():
    return make_tiny


@pytest.fixture
def toy_corpus(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text("a b a\nb c\n", encoding="utf-8")
    return path


def kernel_matrix(model):
    """The composite kernel (Gibbs sweep then length jump) as a dense matrix over all supported sentences."""
    from trflm import oracle, sampler

    sents, target = oracle.exact_target_table(model)
    pos = {s: i for i, s in enumerate(sents)}
    n = len(sents)
    # one Gibbs sweep: compose the single-site kernels position by position
    gibbs = np.zeros((n, n))
    for i, s in enumerate(sents):
        frontier = {s: 1.0}
        for p in range(len(s)):
            nxt = {}
            for cur, w0 in frontier.items():
                cond = sampler.gibbs_conditional(cur, p, model)
                for w in range(model.V):
                    new = cur[:p] + (w,) + cur[p + 1:]
                    nxt[new] = nxt.get(new, 0.0) + w0 * cond[w]
            frontier = nxt
        for t, w in frontier.items():
            gibbs[i, pos[t]] += w
    jump = np.zeros((n, n))
    for i, s in enumerate(sents):
        for t, w in sampler.jump_transitions(s, model):
            jump[i, pos[t]] += w
    return sents, target, gibbs @ jump
