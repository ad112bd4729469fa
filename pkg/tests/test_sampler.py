import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp

from conftest import kernel_matrix, make_tiny
from trflm import oracle, sampler
from trflm.corpus import LengthPrior
from trflm.sampler import ChainState, draw_batch, gibbs_conditional, init_chains, length_jump, log_accept_ratio


def brute_conditional(model, sentence, pos):
    scores = [model.score(sentence[:pos] + (w,) + sentence[pos + 1:]) for w in range(model.V)]
    return np.exp(np.array(scores) - logsumexp(scores))


@pytest.mark.parametrize("templates,C", [("w:1-2", 2), ("w:1-3;c:1-2;b", 2), ("w:1-2;c:1-2;ws:2;csT:3-4;b", 3),
                                         ("c:1-3", 4)])
def test_conditional_matches_brute_force(templates, C):
    mdl = make_tiny(V=5, m=5, templates=templates, C=C, seed=3)
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = tuple(int(x) for x in rng.integers(0, 5, rng.integers(1, 6)))
        for pos in range(len(s)):
            assert np.abs(gibbs_conditional(s, pos, mdl) - brute_conditional(mdl, s, pos)).max() < 1e-12


def test_conditional_unigram_and_zero():
    mdl = make_tiny(V=4, m=3, templates="w:1", seed=1)
    soft = np.exp(mdl.lam - logsumexp(mdl.lam))
    for s in [(0, 1, 2), (3, 3, 3), (2,)]:
        for pos in range(len(s)):
            assert np.allclose(gibbs_conditional(s, pos, mdl), soft, atol=1e-14)
    mdl.set_lambda(np.zeros(mdl.d))
    assert np.allclose(gibbs_conditional((1, 2), 1, mdl), 0.25, atol=1e-15)


def test_gibbs_empirical_tv():
    mdl = make_tiny(V=3, m=2, templates="w:1-2", seed=2, length_counts=[0, 1])
    rng = np.random.Generator(np.random.PCG64(5))
    state = ChainState([0, 0], mdl.score((0, 0)), rng)
    counts = np.zeros((3, 3))
    n = 100_000
    for _ in range(n):
        sampler.gibbs_sweep(state, mdl)
        counts[state.sentence[0], state.sentence[1]] += 1
    X, logp = oracle.exact_sentences(mdl, 2)
    exact = np.zeros((3, 3))
    exact[X[:, 0], X[:, 1]] = np.exp(logp)
    assert 0.5 * np.abs(counts / n - exact).sum() < 0.01
    assert abs(state.cached_score - mdl.score(state.sentence)) < 1e-9


@pytest.mark.parametrize("seed,templates,m", [(0, "w:1-2", 3), (1, "w:1-2;c:1-2;b", 3), (2, "w:1-2;ws:2", 3)])
def test_kernel_preserves_target(seed, templates, m):
    mdl = make_tiny(V=3, m=m, templates=templates, seed=seed)
    _, target, T = kernel_matrix(mdl)
    assert np.allclose(T.sum(axis=1), 1.0, atol=1e-12)
    assert np.abs(target @ T - target).max() < 1e-10


def test_kernel_with_gap_in_support():
    mdl = make_tiny(V=2, m=4, seed=3, length_counts=[2, 0, 1, 3])
    _, target, T = kernel_matrix(mdl)
    assert np.abs(target @ T - target).max() < 1e-10


def test_kernel_is_ergodic():
    mdl = make_tiny(V=2, m=3, seed=4)
    _, _, T = kernel_matrix(mdl)
    reach = np.linalg.matrix_power((T > 0).astype(float), T.shape[0])
    assert (reach > 0).all()


def test_chain_visits_every_length():
    mdl = make_tiny(V=3, m=4, seed=6, length_counts=[1, 1, 1, 5])
    state = ChainState([0], mdl.score((0,)), np.random.Generator(np.random.PCG64(1)))
    seen = set()
    for _ in range(2000):
        sampler.step(state, mdl)
        seen.add(len(state.sentence))
    assert seen == {1, 2, 3, 4}


def test_jump_noop_with_single_length():
    mdl = make_tiny(V=3, m=1, seed=0)
    state = ChainState([2], mdl.score((2,)), np.random.Generator(np.random.PCG64(0)))
    before = state.rng.bit_generator.state
    length_jump(state, mdl)
    assert state.sentence == [2]
    assert state.rng.bit_generator.state == before


def test_length_histogram_matches_marginals():
    mdl = make_tiny(V=2, m=3, seed=8)
    chains = init_chains(mdl, 4, seed=3)
    hist = np.zeros(mdl.m + 1)
    for _ in range(25):
        batch = draw_batch(chains, mdl, 2000)
        hist += batch.length_histogram
    tv = 0.5 * np.abs(hist / hist.sum() - oracle.exact_length_marginals(mdl)).sum()
    assert tv < 0.02


def test_histogram_matches_pi_at_zeta_star():
    mdl = make_tiny(V=3, m=3, seed=9)
    mdl.zeta = oracle.zeta_star(mdl)
    chains = init_chains(mdl, 4, seed=1)
    hist = np.zeros(mdl.m + 1)
    for _ in range(20):
        hist += draw_batch(chains, mdl, 2000).length_histogram
    assert 0.5 * np.abs(hist / hist.sum() - mdl.prior.pi).sum() < 0.02


def test_draw_batch_basic():
    mdl = make_tiny(seed=1)
    chains = init_chains(mdl, 1, seed=0)
    batch = draw_batch(chains, mdl, 1)
    assert batch.K == 1 and batch.length_histogram.sum() == 1
    with pytest.raises(ValueError):
        draw_batch(chains, mdl, 0)


def test_draw_batch_deterministic_across_threads():
    mdl = make_tiny(V=3, m=3, seed=2)
    out = []
    for threads in (1, 1, 4):
        chains = init_chains(mdl, 4, seed=7)
        b1 = draw_batch(chains, mdl, 300, threads=threads)
        b2 = draw_batch(chains, mdl, 300, threads=threads)
        out.append((b1.samples, b2.samples, b1.length_histogram.tolist(), b1.acceptance))
    assert out[0] == out[1] == out[2]
    assert sum(out[0][2]) == 300


def test_round_robin_order():
    mdl = make_tiny(V=3, m=3, seed=2)
    batch = draw_batch(init_chains(mdl, 3, seed=7), mdl, 7)
    solo = [draw_batch(init_chains(mdl, 3, seed=7)[c:c + 1], mdl, n).samples for c, n in enumerate((3, 2, 2))]
    assert batch.samples == [solo[j % 3][j // 3] for j in range(7)]


def test_cached_score_stays_fresh():
    mdl = make_tiny(V=4, m=4, templates="w:1-3;c:1-2;ws:2;b", seed=5)
    state = init_chains(mdl, 1, seed=2)[0]
    for _ in range(300):
        sampler.step(state, mdl)
        assert abs(state.cached_score - mdl.score(state.sentence)) < 1e-9


@given(st.integers(-64, 64), st.integers(0, 50))
@settings(max_examples=40, deadline=None)
def test_accept_ratio_zeta_shift_invariant(shift, seed):
    mdl = make_tiny(V=3, m=4, seed=seed)
    rng = np.random.default_rng(seed)
    # dyadic values keep the zeta differences exact in floating point
    mdl.zeta = np.concatenate([[0.0, 0.0], rng.integers(-16, 16, 3) / 8.0])
    shifted = mdl.copy()
    shifted.zeta = mdl.zeta + shift / 4.0
    for s in [(0,), (1, 2), (2, 0, 1)]:
        for prop in [s + (1,), s[:-1]]:
            if len(prop) == 0:
                continue
            assert log_accept_ratio(s, prop, mdl) == log_accept_ratio(s, prop, shifted)


def test_accept_ratio_detailed_balance():
    mdl = make_tiny(V=3, m=3, seed=4)
    k = sampler._kernel(mdl)
    a, b = (1, 2), (1, 2, 0)
    fwd = log_accept_ratio(a, b, mdl)
    bwd = log_accept_ratio(b, a, mdl)
    assert abs(fwd + bwd) < 1e-12
    lw = lambda s: mdl.log_weight(s)
    # pi(a) q(a->b) = pi(b) q(b->a) once multiplied by the MH ratio
    up_a, _ = sampler._move_probs(k, 2)
    _, down_b = sampler._move_probs(k, 3)
    assert abs((lw(b) + math.log(down_b)) - (lw(a) + math.log(up_a) + k.log_q[0]) - fwd) < 1e-12


def test_seed_streams_differ():
    a = sampler.seed_sequence(1, "train", 0).generate_state(2).tolist()
    b = sampler.seed_sequence(1, "sample", 0).generate_state(2).tolist()
    c = sampler.seed_sequence(1, "train", 1).generate_state(2).tolist()
    assert len({tuple(a), tuple(b), tuple(c)}) == 3
    assert a == sampler.seed_sequence(1, "train", 0).generate_state(2).tolist()


@pytest.mark.parametrize("V", [3, 40])
def test_sweep_draws_from_conditional(V):
    # V=3 exercises the list path, V=40 the array path
    mdl = make_tiny(V=V, m=1, templates="w:1;c:1", C=4 if V > 4 else 2, seed=11, lam_scale=1.5)
    state = ChainState([0], mdl.score((0,)), np.random.Generator(np.random.PCG64(2)))
    n = 40_000
    counts = np.zeros(V)
    for _ in range(n):
        sampler.gibbs_sweep(state, mdl)
        counts[state.sentence[0]] += 1
    exact = gibbs_conditional((0,), 0, mdl)
    assert 0.5 * np.abs(counts / n - exact).sum() < 0.03
