"""Joint stochastic approximation: sample a batch, then move lambda and zeta together."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from .corpus import ClassMap, EncodedCorpus
from .errors import ConfigError, DivergenceError, ModelFormatError, ValidationError
from .features import Extractor, FeatureIndex, TemplateSet
from .model import TrfModel, read_model_file
from .sampler import ChainState, SampleBatch, draw_batch, init_chains

logger = logging.getLogger(__name__)


@dataclass
class SaConfig:
    K: int = 300
    beta_lambda: float = 0.8
    beta_zeta: float = 0.6
    t_c: float = 3000.0
    t_0: int = 2000
    t_max: int = 20000
    l2: float = 4e-5
    chains: int = 6
    sweeps_per_draw: int = 1
    checkpoint_every: int = 0
    seed: int = 0
    threads: int = 1
    freeze_lambda: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("beta_lambda", "beta_zeta"):
            b = getattr(self, name)
            if not 0.5 < b <= 1.0:
                raise ConfigError(f"{name}={b} must lie in (0.5, 1]")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.t_c <= 0:
            raise ConfigError("t_c must be > 0")
        if not 0 <= self.t_0 <= self.t_max:
            raise ConfigError(f"need 0 <= t_0 <= t_max (t_0={self.t_0}, t_max={self.t_max})")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        if self.chains < 1 or self.sweeps_per_draw < 1 or self.threads < 1:
            raise ConfigError("chains, sweeps_per_draw and threads must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: type(f.default) for f in fields(cls)}


def learning_rate(t: int, beta: float, t_0: int, t_c: float) -> float:
    """1/t_c up to t_0, then 1/(t_c + (t - t_0)^beta)."""
    if t < 1:
        raise ValueError("t must be >= 1")
    if t <= t_0:
        return 1.0 / t_c
    return 1.0 / (t_c + (t - t_0) ** beta)


def compute_data_expectation(corpus: EncodedCorpus, index: FeatureIndex, templates: TemplateSet,
                             classes: ClassMap) -> np.ndarray:
    """Mean feature counts per training sentence."""
    ex = Extractor(classes, templates, index)
    acc = np.zeros(index.d)
    for sent in corpus.sentences:
        fv = ex.extract(sent)
        acc[fv.indices] += fv.counts
    if not corpus.sentences:
        raise ValidationError("empty corpus")
    return acc / len(corpus.sentences)


@dataclass
class TrainState:
    t: int
    model: TrfModel
    data_expectation: np.ndarray
    chains: list[ChainState]
    log: list[tuple] = field(default_factory=list)

    def __post_init__(self):
        self.data_expectation = np.array(self.data_expectation, dtype=float)
        self.data_expectation.setflags(write=False)


def batch_expectation(model: TrfModel, batch: SampleBatch) -> np.ndarray:
    """Batch feature mean with each length re-weighted from its sampled frequency to pi_l."""
    K = batch.K
    pi = model.prior.pi
    acc = np.zeros(model.d)
    for s in batch.samples:
        l = len(s)
        fv = model.features(s)
        acc[fv.indices] += fv.counts * (pi[l] / batch.length_histogram[l])
    return acc


def sa_step(state: TrainState, batch: SampleBatch, cfg: SaConfig) -> TrainState:
    model = state.model
    t = state.t + 1
    g_lam = 0.0 if cfg.freeze_lambda else learning_rate(t, cfg.beta_lambda, cfg.t_0, cfg.t_c)
    g_zeta = learning_rate(t, cfg.beta_zeta, cfg.t_0, cfg.t_c)
    pi = model.prior.pi
    support = model.prior.support
    delta = batch.length_histogram / batch.K

    with np.errstate(invalid="ignore", over="ignore"):
        grad = state.data_expectation - batch_expectation(model, batch) - 2.0 * cfg.l2 * model.lam
        lam = model.lam + g_lam * grad
        zeta = model.zeta.copy()
        zeta[support] += g_zeta * delta[support] / pi[support]
        zeta[1:] -= zeta[1]

    if not (np.isfinite(lam).all() and np.isfinite(zeta).all()):
        raise DivergenceError(f"non-finite update at t={t}", dump={
            "t": t, "gamma_lambda": g_lam, "gamma_zeta": g_zeta,
            "grad_norm": float(np.linalg.norm(grad)), "zeta": zeta.tolist(),
            "lambda_max_abs": float(np.nanmax(np.abs(lam))) if lam.size else 0.0})
    if g_lam:
        model.set_lambda(lam)
    model.zeta = zeta
    tv = 0.5 * float(np.abs(delta[1:] - pi[1:]).sum())
    state.log.append((t, g_lam, g_zeta, float(np.linalg.norm(grad)), tv))
    state.t = t
    return state


def init_state(model: TrfModel, corpus: EncodedCorpus, cfg: SaConfig) -> TrainState:
    work = model.copy()
    e_d = compute_data_expectation(corpus, work.index, work.templates, work.classes)
    return TrainState(0, work, e_d, init_chains(work, cfg.chains, cfg.seed, stream="train"))


def checkpoint_lines(state: TrainState, cfg: SaConfig) -> list[str]:
    lines = [f"state\tt\t{state.t}", f"state\tconfig\t{json.dumps(asdict(cfg), sort_keys=True)}"]
    for c in state.chains:
        rng_state = json.dumps(c.rng.bit_generator.state, sort_keys=True)
        lines.append(f"chain\t{c.stream}\t{' '.join(map(str, c.sentence))}\t{rng_state}")
    return lines


def save_checkpoint(state: TrainState, cfg: SaConfig, path):
    state.model.save(path, checkpoint_lines(state, cfg))


def load_checkpoint(path, corpus: EncodedCorpus) -> tuple[TrainState, SaConfig]:
    model, records = read_model_file(path)
    t, cfg, chains = None, None, []
    for rec in records:
        if rec[0] == "state" and rec[1] == "t":
            t = int(rec[2])
        elif rec[0] == "state" and rec[1] == "config":
            cfg = SaConfig(**json.loads(rec[2]))
        elif rec[0] == "chain":
            rng = np.random.Generator(np.random.PCG64())
            rng.bit_generator.state = json.loads(rec[3])
            sent = [int(w) for w in rec[2].split()]
            chains.append(ChainState(sent, model.score(sent), rng, stream=int(rec[1])))
        else:
            raise ModelFormatError(f"{path}: unexpected record {rec[0]!r}")
    if t is None or cfg is None or len(chains) != cfg.chains:
        raise ModelFormatError(f"{path}: not a checkpoint (missing state block)")
    e_d = compute_data_expectation(corpus, model.index, model.templates, model.classes)
    return TrainState(t, model, e_d, chains), cfg


def run(state: TrainState, cfg: SaConfig, checkpoint_path=None,
        callback: Optional[Callable[[TrainState, SampleBatch], None]] = None) -> TrainState:
    """Iterate draw_batch + sa_step until t_max, checkpointing every ``checkpoint_every`` steps."""
    while state.t < cfg.t_max:
        batch = draw_batch(state.chains, state.model, cfg.K, cfg.sweeps_per_draw, cfg.threads)
        sa_step(state, batch, cfg)
        if callback is not None:
            callback(state, batch)
        if checkpoint_path and cfg.checkpoint_every and state.t % cfg.checkpoint_every == 0:
            save_checkpoint(state, cfg, checkpoint_path)
        if state.t % 1000 == 0:
            row = state.log[-1]
            logger.info("t=%d gamma_lambda=%.3g gamma_zeta=%.3g |grad|=%.4g tv=%.4f", *row)
    return state


def train(model: TrfModel, corpus: EncodedCorpus, cfg: SaConfig, checkpoint_path=None,
          callback=None) -> TrfModel:
    """Train a copy of ``model`` on ``corpus``; the input model is left untouched."""
    return run(init_state(model, corpus, cfg), cfg, checkpoint_path, callback).model


def format_log(log) -> str:
    rows = ["t\tgamma_lambda\tgamma_zeta\tresidual_norm\ttv_length"]
    rows += ["\t".join([str(r[0])] + [repr(float(x)) for x in r[1:]]) for r in log]
    return "\n".join(rows) + "\n"
