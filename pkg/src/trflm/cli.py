"""Command-line front end.

Every option can come from a ``key = value`` config file (``--config``), with
an optional ``[command]`` section per subcommand, or from a flag; flags win.
Unknown keys are rejected.

Exit codes: 0 ok, 2 configuration, 3 input/output, 4 training divergence,
5 validation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import evaluation, oracle, sampler, trainer
from .errors import (ConfigError, CorpusError, DivergenceError, ModelFormatError, TrfError,
                     ValidationError)
from .features import TemplateSet, build_index, dump_features
from .fileio import atomic_write
from .model import TrfModel

logger = logging.getLogger("trflm")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_VALIDATION = 0, 2, 3, 4, 5

REQUIRED = object()
_SA = {f.name: f.default for f in fields(trainer.SaConfig)}

COMMON = {"seed": 0, "threads": 1, "log_level": "warning"}
COMMANDS = {
    "build-vocab": {"corpus": REQUIRED, "output": REQUIRED, "max_size": 0, "min_count": 1},
    "classes": {"vocab": REQUIRED, "output": REQUIRED, "num_classes": REQUIRED, "class_map": ""},
    "train": {"corpus": REQUIRED, "output": REQUIRED, "vocab": "", "max_size": 0, "min_count": 1,
              "num_classes": 200, "class_map": "", "max_len": 82, "templates": "w:1-3;c:1-3;b",
              "cutoff": 0, "log": "", "checkpoint": "", "resume": "", "feature_dump": "",
              **{k: v for k, v in _SA.items() if k not in ("seed", "threads")}},
    "sample": {"model": REQUIRED, "output": REQUIRED, "K": 100, "chains": 1, "sweeps_per_draw": 1,
               "burn_in": 0, "report": ""},
    "score": {"model": REQUIRED, "nbest": REQUIRED, "output": REQUIRED},
    "ppl": {"model": REQUIRED, "corpus": REQUIRED, "output": ""},
    "rescore": {"nbest": REQUIRED, "scores": REQUIRED, "scores2": "", "scheme": "Log", "alpha": 1.0,
                "output": REQUIRED},
    "tune-alpha": {"nbest": REQUIRED, "refs": REQUIRED, "scores": REQUIRED, "scores2": REQUIRED,
                   "scheme": "Log", "grid_step": 0.01, "unit": "word", "output": ""},
    "wer": {"refs": REQUIRED, "hyps": REQUIRED, "unit": "word", "output": ""},
    "oracle": {"model": REQUIRED, "budget": oracle.DEFAULT_BUDGET, "output": ""},
}


def _convert(key: str, default, raw: str):
    if default is REQUIRED or isinstance(default, str):
        return raw
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def read_config_file(path, command: str) -> dict:
    """Global keys plus the keys of the ``[command]`` section."""
    out, section = {}, None
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in COMMANDS:
                raise ConfigError(f"{path}:{lineno}: unknown section [{section}]")
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        if section is None or section == command:
            out[key.strip()] = (value.strip(), f"{path}:{lineno}")
    return out


def resolve_config(command: str, file_values: dict, flag_values: dict) -> dict:
    """Merge defaults, config-file values and flags; validate keys, types and SA settings."""
    spec = {**COMMON, **COMMANDS[command]}
    cfg = {k: v for k, v in spec.items() if v is not REQUIRED}
    for key, (raw, where) in file_values.items():
        if key not in spec:
            raise ConfigError(f"{where}: unknown key {key!r} for command {command}")
        cfg[key] = _convert(key, spec[key], raw)
    for key, raw in flag_values.items():
        if raw is not None:
            cfg[key] = _convert(key, spec[key], raw)
    missing = [k for k, v in spec.items() if v is REQUIRED and k not in cfg]
    if missing:
        raise ConfigError(f"{command}: missing required option(s): {', '.join(missing)}")
    if command == "train":
        sa_config(cfg)
        TemplateSet.parse(cfg["templates"])
    return cfg


def sa_config(cfg: dict) -> trainer.SaConfig:
    return trainer.SaConfig(**{k: cfg[k] for k in _SA})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trflm", description="Trans-dimensional random field language models")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, spec in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        for key in {**COMMON, **spec}:
            flags = {f"--{key}", f"--{key.replace('_', '-')}"}
            p.add_argument(*sorted(flags), dest=key, default=None, metavar="VALUE")
    return parser


def _write_or_print(path: str, text: str):
    if path:
        atomic_write(path, text)
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# commands


def cmd_build_vocab(cfg):
    vocab = corpus_mod.build_vocab(cfg["corpus"], cfg["max_size"] or None, cfg["min_count"])
    vocab.save(cfg["output"])


def cmd_classes(cfg):
    vocab = corpus_mod.Vocabulary.load(cfg["vocab"])
    classes = corpus_mod.assign_classes(vocab, int(cfg["num_classes"]), cfg["class_map"] or None)
    classes.save(cfg["output"], vocab)


def cmd_train(cfg):
    sa = sa_config(cfg)
    sentences = corpus_mod.read_sentences(cfg["corpus"])
    if cfg["vocab"]:
        vocab = corpus_mod.Vocabulary.load(cfg["vocab"])
    else:
        vocab = corpus_mod.vocab_from_sentences(sentences, cfg["max_size"] or None, cfg["min_count"])
    encoded = corpus_mod.encode_sentences(sentences, vocab, cfg["max_len"])
    if cfg["resume"]:
        state, _ = trainer.load_checkpoint(cfg["resume"], encoded)
    else:
        num_classes = min(cfg["num_classes"], len(vocab))
        classes = corpus_mod.assign_classes(vocab, num_classes, cfg["class_map"] or None)
        templates = TemplateSet.parse(cfg["templates"])
        index = build_index(encoded, classes, templates, cfg["cutoff"])
        prior = corpus_mod.length_stats(encoded)
        model = TrfModel(vocab, classes, templates, index, prior)
        state = trainer.init_state(model, encoded, sa)
    checkpoint = cfg["checkpoint"] or (cfg["output"] + ".ckpt" if sa.checkpoint_every else None)
    # on divergence the dump goes to stderr and nothing is written
    trainer.run(state, sa, checkpoint)
    if cfg["checkpoint"]:
        # an explicit checkpoint path always receives the final state
        trainer.save_checkpoint(state, sa, cfg["checkpoint"])
    if cfg["log"]:
        atomic_write(cfg["log"], trainer.format_log(state.log))
    state.model.save(cfg["output"])
    if cfg["feature_dump"]:
        atomic_write(cfg["feature_dump"], dump_features(state.model.index, state.model.lam, state.model.vocab))


def cmd_sample(cfg):
    model = TrfModel.load(cfg["model"])
    chains = sampler.init_chains(model, cfg["chains"], cfg["seed"], stream="sample")
    if cfg["burn_in"]:
        sampler.draw_batch(chains, model, cfg["burn_in"] * cfg["chains"], 1, cfg["threads"])
    batch = sampler.draw_batch(chains, model, cfg["K"], cfg["sweeps_per_draw"], cfg["threads"])
    atomic_write(cfg["output"], "".join(" ".join(model.vocab.decode(s)) + "\n" for s in batch.samples))
    lines = ["length\tcount\tfrequency\tpi"]
    for l in range(1, model.m + 1):
        c = int(batch.length_histogram[l])
        lines.append(f"{l}\t{c}\t{c / batch.K!r}\t{float(model.prior.pi[l])!r}")
    for move, rate in sorted(batch.acceptance_rates().items()):
        lines.append(f"accept_{move}\t{float(rate)!r}")
    _write_or_print(cfg["report"], "\n".join(lines) + "\n")


def cmd_score(cfg):
    model = TrfModel.load(cfg["model"])
    nbest = evaluation.NBestSet.read(cfg["nbest"])
    table, skipped = evaluation.score_nbest(model, nbest)
    if skipped:
        logger.warning("%d hypotheses have unsupported lengths and were not scored", len(skipped))
    table.write(cfg["output"])


def cmd_ppl(cfg):
    model = TrfModel.load(cfg["model"])
    encoded = corpus_mod.encode(cfg["corpus"], model.vocab, model.m)
    res = evaluation.perplexity(model, encoded)
    text = (f"ppl\t{float(res.ppl)!r}\nlog_prob\t{float(res.log_prob)!r}\ntokens\t{res.tokens}\n"
            f"sentences\t{res.sentences}\nexcluded\t{res.excluded}\ntruncated\t{encoded.n_truncated}\n")
    _write_or_print(cfg["output"], text)


def _tables(cfg):
    t1 = evaluation.ScoreTable.read(cfg["scores"])
    t2 = evaluation.ScoreTable.read(cfg["scores2"]) if cfg["scores2"] else None
    return t1, t2


def cmd_rescore(cfg):
    nbest = evaluation.NBestSet.read(cfg["nbest"])
    t1, t2 = _tables(cfg)
    table = t1 if t2 is None else evaluation.combine_tables(cfg["scheme"], cfg["alpha"], t1, t2)
    choice = evaluation.rescore(nbest, table)
    atomic_write(cfg["output"], evaluation.format_references(evaluation.selected_hypotheses(nbest, choice)))


def cmd_tune_alpha(cfg):
    nbest = evaluation.NBestSet.read(cfg["nbest"])
    refs = evaluation.read_references(cfg["refs"])
    t1, t2 = _tables(cfg)
    alpha, curve = evaluation.tune_alpha(nbest, refs, t1, t2, cfg["scheme"], cfg["grid_step"], cfg["unit"])
    text = f"alpha\t{float(alpha)!r}\n" + "".join(f"curve\t{float(a)!r}\t{float(r)!r}\n" for a, r in curve)
    _write_or_print(cfg["output"], text)


def cmd_wer(cfg):
    refs = evaluation.read_references(cfg["refs"])
    hyps = evaluation.read_references(cfg["hyps"])
    report = evaluation.error_rate(refs, hyps, cfg["unit"])
    _write_or_print(cfg["output"], report.format(cfg["unit"]))


def cmd_oracle(cfg):
    model = TrfModel.load(cfg["model"])
    _write_or_print(cfg["output"], oracle.exact_summary(model, cfg["budget"]).format())


HANDLERS = {
    "build-vocab": cmd_build_vocab, "classes": cmd_classes, "train": cmd_train, "sample": cmd_sample,
    "score": cmd_score, "ppl": cmd_ppl, "rescore": cmd_rescore, "tune-alpha": cmd_tune_alpha,
    "wer": cmd_wer, "oracle": cmd_oracle,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    flag_values = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        file_values = read_config_file(args.config, args.command) if args.config else {}
        cfg = resolve_config(args.command, file_values, flag_values)
        logging.basicConfig(level=cfg["log_level"].upper(), format="%(levelname)s %(name)s: %(message)s")
        HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}\n{json.dumps(exc.dump, indent=1)}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CorpusError, ModelFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, TrfError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
