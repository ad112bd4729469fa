import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_tiny
from trflm import oracle, trainer
from trflm.corpus import ClassMap, EncodedCorpus, LengthPrior, Vocabulary
from trflm.errors import ConfigError, DivergenceError, ModelFormatError
from trflm.features import FeatureIndex, TemplateSet, build_index
from trflm.model import serialize
from trflm.sampler import SampleBatch, draw_batch, init_chains
from trflm.trainer import SaConfig, learning_rate

UNI = TemplateSet.parse("w:1")
ONE = ClassMap([0, 0, 0], 1)


def test_default_schedule():
    cfg = SaConfig()
    assert (cfg.K, cfg.beta_lambda, cfg.beta_zeta, cfg.t_c, cfg.t_0, cfg.t_max, cfg.l2) == \
        (300, 0.8, 0.6, 3000.0, 2000, 20000, 4e-5)


@pytest.mark.parametrize("bad", [dict(beta_lambda=0.5), dict(beta_zeta=1.2), dict(K=0), dict(t_0=5, t_max=4),
                                 dict(l2=-1.0), dict(chains=0), dict(t_c=0.0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        SaConfig(**bad)


def test_learning_rate_examples():
    assert learning_rate(1, 0.8, 2000, 3000) == 1 / 3000
    assert learning_rate(2000, 0.8, 2000, 3000) == 1 / 3000
    assert learning_rate(2001, 0.8, 2000, 3000) == 1 / 3001
    assert learning_rate(2000 + 32, 0.8, 2000, 3000) == pytest.approx(1 / (3000 + 16))
    with pytest.raises(ValueError):
        learning_rate(0, 0.8, 2000, 3000)


@given(st.integers(1, 10**7), st.floats(0.51, 1.0), st.integers(0, 5000), st.floats(1.0, 1e4))
def test_learning_rate_monotone(t, beta, t_0, t_c):
    assert learning_rate(t + 1, beta, t_0, t_c) <= learning_rate(t, beta, t_0, t_c)


def test_robbins_monro_tail():
    # for beta in (0.5, 1] the tail behaves like t^-beta: divergent sum, convergent sum of squares
    for beta in (0.6, 0.8, 1.0):
        t = np.array([1e15, 1e16])
        g = np.array([learning_rate(int(x), beta, 2000, 3000.0) for x in t])
        assert np.allclose(g * t ** beta, 1.0, rtol=0.01)
        assert 2 * beta > 1 and beta <= 1


def test_data_expectation_examples():
    idx = FeatureIndex([("w", 0, 1), ("w", 0, 2)])
    e = trainer.compute_data_expectation(EncodedCorpus([(1, 2)], 4), idx, UNI, ONE)
    assert e.tolist() == [1.0, 1.0]
    e = trainer.compute_data_expectation(EncodedCorpus([(1,), (1, 1)], 4), idx, UNI, ONE)
    assert e.tolist() == [1.5, 0.0]


def _state(model, cfg, corpus=None):
    corpus = corpus or EncodedCorpus([(0, 1), (2,)], model.m)
    return trainer.init_state(model, corpus, cfg)


def test_zeta_update_concentrated_batch():
    mdl = make_tiny(V=3, m=3, seed=0)
    cfg = SaConfig(K=4, chains=1, t_c=10.0, t_0=100, t_max=100)
    st_ = _state(mdl, cfg)
    before = st_.model.zeta.copy()
    batch = SampleBatch([(0, 0, 0)] * 4, np.bincount([3] * 4, minlength=4))
    trainer.sa_step(st_, batch, cfg)
    diff = st_.model.zeta - before
    assert diff[1] == 0 and diff[2] == 0
    assert diff[3] == pytest.approx(0.1 / mdl.prior.pi[3])
    # all mass at length 1: zeta_1 rises, re-centering lowers everything else
    before = st_.model.zeta.copy()
    trainer.sa_step(st_, SampleBatch([(0,)] * 4, np.bincount([1] * 4, minlength=4)), cfg)
    diff = st_.model.zeta - before
    assert st_.model.zeta[1] == 0.0
    assert diff[2] == pytest.approx(-0.1 / mdl.prior.pi[1]) and diff[3] == pytest.approx(diff[2])


def test_lambda_update_formula():
    mdl = make_tiny(V=3, m=2, templates="w:1", seed=0, length_counts=[1, 1])
    cfg = SaConfig(K=3, chains=1, t_c=4.0, t_0=10, t_max=10, l2=0.25)
    st_ = _state(mdl, cfg, EncodedCorpus([(0, 1)], 2))
    lam0 = st_.model.lam.copy()
    samples = [(2,), (1, 1), (0, 1)]
    batch = SampleBatch(samples, np.bincount([1, 2, 2], minlength=3))
    # length 1 weight pi_1/1, length 2 weight pi_2/2, pi = (1/2, 1/2)
    e_b = np.zeros(3)
    e_b[2] += 0.5
    e_b[1] += 0.25 * 2 + 0.25
    e_b[0] += 0.25
    e_d = np.array([1.0, 1.0, 0.0])
    trainer.sa_step(st_, batch, cfg)
    expected = lam0 + 0.25 * (e_d - e_b - 0.5 * lam0)
    assert np.allclose(st_.model.lam, expected, atol=1e-15)
    assert abs(st_.model.log_z1 - oracle.enumerate_log_z(st_.model, 1)) < 1e-12


def test_zeta1_pinned_and_log_finite():
    mdl = make_tiny(V=3, m=3, seed=2)
    cfg = SaConfig(K=10, chains=2, t_c=5.0, t_0=10, t_max=40, seed=1)
    st_ = _state(mdl, cfg)
    trainer.run(st_, cfg, callback=lambda s, b: (assert_zeta1(s)))
    assert len(st_.log) == 40
    assert np.isfinite(np.array(st_.log)).all()
    assert trainer.format_log(st_.log).splitlines()[0] == "t\tgamma_lambda\tgamma_zeta\tresidual_norm\ttv_length"


def assert_zeta1(state):
    assert state.model.zeta[1] == 0.0


def test_data_expectation_frozen():
    st_ = _state(make_tiny(), SaConfig(K=2, chains=1, t_max=5, t_0=2))
    with pytest.raises(ValueError):
        st_.data_expectation[0] = 1.0


def test_train_leaves_input_untouched():
    mdl = make_tiny(seed=3)
    text = serialize(mdl)
    trainer.train(mdl, EncodedCorpus([(0, 1)], 3), SaConfig(K=5, chains=2, t_c=5.0, t_0=2, t_max=5))
    assert serialize(mdl) == text


def test_divergence_halts_with_dump():
    mdl = make_tiny(seed=1)
    cfg = SaConfig(K=5, chains=1, t_c=5.0, t_0=2, t_max=5)
    st_ = _state(mdl, cfg)
    st_.data_expectation = np.full(mdl.d, np.inf)
    lam = st_.model.lam.copy()
    batch = draw_batch(st_.chains, st_.model, 5)
    with pytest.raises(DivergenceError) as err:
        trainer.sa_step(st_, batch, cfg)
    assert err.value.dump["t"] == 1
    assert np.array_equal(st_.model.lam, lam) and st_.t == 0


def test_checkpoint_resume_bit_identical(tmp_path):
    mdl = make_tiny(V=3, m=3, templates="w:1-2;c:1-2", seed=4)
    corpus = EncodedCorpus([(0, 1), (2,), (1, 1, 2)], 3)
    cfg = SaConfig(K=8, chains=3, t_c=5.0, t_0=10, t_max=30, seed=9, checkpoint_every=10)
    full = trainer.train(mdl, corpus, cfg)
    ck = tmp_path / "ck.trf"
    trainer.train(mdl, corpus, dataclasses.replace(cfg, t_max=20), checkpoint_path=ck)
    state, loaded_cfg = trainer.load_checkpoint(ck, corpus)
    assert state.t == 20 and loaded_cfg.t_max == 20
    resumed = trainer.run(state, dataclasses.replace(loaded_cfg, t_max=30)).model
    assert serialize(resumed) == serialize(full)


def test_load_checkpoint_rejects_plain_model(tmp_path):
    mdl = make_tiny()
    mdl.save(tmp_path / "m.trf")
    with pytest.raises(ModelFormatError):
        trainer.load_checkpoint(tmp_path / "m.trf", EncodedCorpus([(0,)], 3))


def _tiny_data_model(seed):
    gen = make_tiny(V=3, m=3, templates="w:1-2", seed=seed)
    data = oracle.exact_sample(gen, 80, np.random.default_rng(seed))
    corpus = EncodedCorpus(data, 3)
    lengths = np.bincount([len(s) for s in data], minlength=4)
    mdl = make_tiny(V=3, m=3, templates="w:1-2", seed=seed, length_counts=lengths[1:])
    return mdl, corpus


def test_moment_matching_at_ml_solution():
    mdl, corpus = _tiny_data_model(1)
    fit = oracle.exact_ml_fit(mdl, corpus.sentences)
    e_d = trainer.compute_data_expectation(corpus, fit.index, fit.templates, fit.classes)
    assert np.abs(e_d - oracle.exact_feature_expectation(fit)).max() < 1e-6


def test_expected_update_vanishes_at_optimum():
    mdl, corpus = _tiny_data_model(2)
    fit = oracle.exact_ml_fit(mdl, corpus.sentences)
    cfg = SaConfig(K=200, chains=20, sweeps_per_draw=2, t_max=100, t_0=100, l2=0.0, seed=3)
    st_ = trainer.init_state(fit, corpus, cfg)
    draw_batch(st_.chains, fit, 200)  # burn-in
    grads = []
    for _ in range(100):
        batch = draw_batch(st_.chains, fit, cfg.K, cfg.sweeps_per_draw)
        grads.append(st_.data_expectation - trainer.batch_expectation(fit, batch))
    grads = np.array(grads)
    mean = grads.mean(axis=0)
    se = grads.std(axis=0, ddof=1) / math.sqrt(len(grads))
    assert np.linalg.norm(mean) < 3 * np.linalg.norm(se)
