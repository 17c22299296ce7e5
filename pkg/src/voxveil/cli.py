"""Command-line entry point: ``voxveil <command> [options]``.

Every command resolves its parameters from built-in defaults, then an
optional YAML file (``--config``), then explicit flags, writes the resolved
record to ``run_config.yaml`` inside a fresh run directory and only then
starts work. Failures exit nonzero with a single diagnostic line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

logger = logging.getLogger("voxveil")

DEFAULTS: dict[str, dict] = {
    "synth-corpus": {"speakers": 20, "utts_per_speaker": 18, "test_per_speaker": 6},
    "train-encoder": {
        "train_manifest": None,
        "heldout_manifest": None,
        "root": None,
        "steps": 600,
        "batch_size": 32,
        "lr": 2e-3,
    },
    "train-generator": {
        "encoder": None,
        "train_manifest": None,
        "root": None,
        "ablation": "none",
        "preset": "desk",
        "steps": None,
        "batch_size": None,
        "peak_lr": None,
        "resume": False,
    },
    "anonymize": {"generator": None, "manifest": None, "root": None},
    "attack": {
        "method": "mi-fgsm",
        "encoder": None,
        "manifest": None,
        "root": None,
        "epsilon": 0.0012,
        "step_size": 0.00012,
        "momentum": 1.4,
        "iterations": 10,
    },
    "evaluate": {
        "protocol": "original",
        "encoder": None,
        "manifest": None,
        "root": None,
        "trials": None,
        "generator": None,
        "attack": None,
        "transform": [],
        "max_per_class": None,
    },
    "make-trials": {"protocol": "original", "manifest": None, "root": None, "max_per_class": None},
    "transform": {"chain": [], "manifest": None, "root": None},
}


class CliError(Exception):
    """A user-facing failure reported as one line."""


@dataclass
class RunConfig:
    command: str
    seed: int
    device: str
    params: dict = field(default_factory=dict)

    def dump(self, path: Path) -> None:
        path.write_text(yaml.safe_dump(asdict(self), sort_keys=True), encoding="utf-8")


def resolve_config(command: str, flags: dict, config_path=None, seed=None, device=None) -> RunConfig:
    """Merge defaults < config file < flags; ``None`` flags mean "not given"."""
    params = dict(DEFAULTS[command])
    file_seed = None
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise CliError(f"{path}: expected a mapping")
        file_seed = loaded.get("seed")
        section = loaded.get(command, {}) or {}
        flat = {k: v for k, v in loaded.items() if k in params}
        for source in (flat, section):
            unknown = set(source) - set(params) - {"seed", "device"}
            if unknown:
                raise CliError(f"{path}: unknown keys for {command}: {sorted(unknown)}")
            params.update({k: v for k, v in source.items() if k in params})
            file_seed = source.get("seed", file_seed)
            device = device if device is not None else source.get("device")
    params.update({k: v for k, v in flags.items() if k in params and v is not None and v != []})
    resolved_seed = seed if seed is not None else (file_seed if file_seed is not None else 0)
    return RunConfig(command, int(resolved_seed), device or "cpu", params)


def _fresh_dir(out, command: str, allow_existing: bool = False) -> Path:
    path = Path(out) if out else Path("runs") / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    if path.exists() and any(path.iterdir()) and not allow_existing:
        raise CliError(f"output directory is not empty: {path}")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _need(params: dict, *keys: str) -> None:
    missing = [k for k in keys if params.get(k) in (None, "")]
    if missing:
        raise CliError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


def _root(params: dict, manifest: Path) -> Path:
    return Path(params["root"]) if params.get("root") else manifest.parent


# -- commands -----------------------------------------------------------------


def cmd_synth_corpus(cfg: RunConfig, out: Path) -> None:
    from .corpus import synthesize_corpus, write_corpus

    p = cfg.params
    train, test = synthesize_corpus(p["speakers"], p["utts_per_speaker"], p["test_per_speaker"], seed=cfg.seed)
    tr, te = write_corpus(out, train, test)
    print(f"wrote {len(train)} train and {len(test)} test utterances: {tr} {te}")


def cmd_train_encoder(cfg: RunConfig, out: Path) -> None:
    from .corpus import load_corpus
    from .encoder import EncoderTrainConfig, freeze, save_encoder, train_reference_encoder

    p = cfg.params
    _need(p, "train_manifest")
    manifest = _existing(p["train_manifest"], "manifest")
    corpus = load_corpus(manifest, _root(p, manifest)).preload()
    heldout = None
    if p["heldout_manifest"]:
        hm = _existing(p["heldout_manifest"], "manifest")
        heldout = load_corpus(hm, _root(p, hm)).preload()
    tcfg = EncoderTrainConfig(steps=p["steps"], batch_size=p["batch_size"], lr=p["lr"], seed=cfg.seed)
    model, report = train_reference_encoder(corpus, tcfg, heldout)
    freeze(model)
    save_encoder(out / "encoder.pt", model, report={"final_loss": report.final_loss, "heldout_eer": report.heldout_eer})
    record = {"final_loss": report.final_loss, "original_eer": report.heldout_eer, "steps": tcfg.steps}
    (out / "report.json").write_text(json.dumps(record, indent=2), encoding="utf-8")
    print(json.dumps(record))


def cmd_train_generator(cfg: RunConfig, out: Path) -> None:
    from .corpus import load_corpus
    from .encoder import load_encoder
    from .generator import GeneratorConfig
    from .losses import LossWeights
    from .signal import FbankConfig, StftConfig
    from .training import TrainConfig, train_generator

    p = cfg.params
    _need(p, "encoder", "train_manifest")
    if p["ablation"] not in ("none", "no-bm"):
        raise CliError(f"unknown ablation {p['ablation']!r}; choose none or no-bm")
    if p["preset"] not in ("desk", "paper"):
        raise CliError(f"unknown preset {p['preset']!r}; choose desk or paper")
    encoder = load_encoder(_existing(p["encoder"], "encoder checkpoint"))
    manifest = _existing(p["train_manifest"], "manifest")
    corpus = load_corpus(manifest, _root(p, manifest)).preload()
    weights = LossWeights.no_batch_mean() if p["ablation"] == "no-bm" else LossWeights()
    overrides = {"seed": cfg.seed, "loss_weights": weights}
    for key, name in (("steps", "total_steps"), ("batch_size", "batch_size"), ("peak_lr", "peak_lr")):
        if p[key] is not None:
            overrides[name] = p[key]
    if p["preset"] == "desk":
        tcfg, gcfg = TrainConfig.desk(**overrides), GeneratorConfig.desk()
    else:
        tcfg, gcfg = TrainConfig(**overrides), GeneratorConfig()
    resolved = {
        "train": {**asdict(tcfg), "loss_weights": asdict(tcfg.loss_weights)},
        "generator": asdict(gcfg),
        "stft": asdict(StftConfig()),
        "fbank": asdict(FbankConfig()),
    }
    (out / "train_config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True), encoding="utf-8")
    train_generator(corpus, encoder, tcfg, out, gcfg)
    print(f"generator checkpoint: {out / 'final.pt'}")


def _process_manifest(entries, root: Path, out: Path, fn, listing: str) -> None:
    from .signal import load_waveform, save_waveform

    mapping, failed = [], 0
    for rel in entries:
        try:
            w = load_waveform(root / rel)
            y = fn(w)
            dst = out / rel
            dst.parent.mkdir(parents=True, exist_ok=True)
            save_waveform(y, dst)
            mapping.append(f"{rel} {Path(rel).as_posix()}\n")
        except Exception as exc:  # per-file failures are logged, the batch continues
            logger.error("%s: %s", rel, exc)
            failed += 1
    (out / listing).write_text("".join(mapping), encoding="utf-8")
    if failed:
        raise CliError(f"{failed} of {len(entries)} files failed")


def cmd_anonymize(cfg: RunConfig, out: Path) -> None:
    from .corpus import read_manifest
    from .generator import anonymize, load_generator

    p = cfg.params
    _need(p, "generator", "manifest")
    g = load_generator(_existing(p["generator"], "generator checkpoint"))
    manifest = _existing(p["manifest"], "manifest")
    entries = read_manifest(manifest)
    _process_manifest(entries, _root(p, manifest), out, lambda w: anonymize(w, g), "anonymized.lst")
    print(f"anonymized {len(entries)} files into {out}")


def cmd_attack(cfg: RunConfig, out: Path) -> None:
    from .attacks import AttackConfig, attack_manifest
    from .corpus import read_manifest
    from .encoder import load_encoder

    p = cfg.params
    _need(p, "encoder", "manifest")
    if p["method"] == "gra":
        raise CliError("attack method gra is not implemented")
    acfg = AttackConfig(p["epsilon"], p["step_size"], p["momentum"], p["iterations"], cfg.seed)
    encoder = load_encoder(_existing(p["encoder"], "encoder checkpoint"))
    manifest = _existing(p["manifest"], "manifest")
    records = attack_manifest(p["method"], read_manifest(manifest), _root(p, manifest), out, encoder, acfg)
    failed = [r for r in records if "error" in r or not r.get("within_bound", False)]
    worst = max((r["linf"] for r in records if "linf" in r), default=0.0)
    print(f"attacked {len(records)} files; max L-inf {worst:.6g} (epsilon {acfg.epsilon})")
    if failed:
        raise CliError(f"{len(failed)} of {len(records)} files failed or exceeded the bound")


def cmd_evaluate(cfg: RunConfig, out: Path) -> None:
    from .attacks import AttackConfig, run_attack
    from .corpus import load_corpus
    from .encoder import load_encoder
    from .evaluation import PROTOCOLS, evaluate_protocol, make_trials, read_trials, write_scores
    from .generator import anonymize, load_generator

    p = cfg.params
    _need(p, "encoder", "manifest")
    if p["protocol"] not in PROTOCOLS:
        raise CliError(f"unknown protocol {p['protocol']!r}; choose from {', '.join(PROTOCOLS)}")
    if p["generator"] and p["attack"]:
        raise CliError("choose at most one of --generator and --attack")
    encoder = load_encoder(_existing(p["encoder"], "encoder checkpoint"))
    manifest = _existing(p["manifest"], "manifest")
    corpus = load_corpus(manifest, _root(p, manifest)).preload()
    anonymizer = None
    if p["generator"]:
        g = load_generator(_existing(p["generator"], "generator checkpoint"))
        anonymizer = lambda w: anonymize(w, g)  # noqa: E731
    elif p["attack"]:
        acfg = AttackConfig(seed=cfg.seed)
        anonymizer = lambda w: run_attack(p["attack"], w, encoder, acfg).waveform  # noqa: E731
    if p["protocol"] != "original" and anonymizer is None:
        raise CliError(f"protocol {p['protocol']} needs --generator or --attack")
    if p["trials"]:
        trials = read_trials(_existing(p["trials"], "trial list"), p["protocol"])
    else:
        trials = make_trials(corpus, p["protocol"], cfg.seed, p["max_per_class"])
    if trials.n_target == 0 or trials.n_nontarget == 0:
        raise CliError("trial list needs both target and nontarget trials")
    report = evaluate_protocol(
        corpus, encoder, p["protocol"], anonymizer, p["transform"], cfg.seed, trials, similarity=anonymizer is not None
    )
    write_scores(out / "scores.txt", report.scores)
    (out / "report.json").write_text(json.dumps(report.as_record(), indent=2), encoding="utf-8")
    print(json.dumps(report.as_record()))


def cmd_make_trials(cfg: RunConfig, out: Path) -> None:
    from .corpus import load_corpus
    from .evaluation import make_trials, write_trials

    p = cfg.params
    _need(p, "manifest")
    manifest = _existing(p["manifest"], "manifest")
    trials = make_trials(load_corpus(manifest, _root(p, manifest)), p["protocol"], cfg.seed, p["max_per_class"])
    write_trials(out / "trials.txt", trials)
    print(f"{trials.n_target} target / {trials.n_nontarget} nontarget trials written to {out / 'trials.txt'}")


def cmd_transform(cfg: RunConfig, out: Path) -> None:
    from .corpus import read_manifest
    from .evaluation import parse_chain

    p = cfg.params
    _need(p, "manifest", "chain")
    chain = parse_chain(p["chain"])
    manifest = _existing(p["manifest"], "manifest")

    def apply(w):
        for t in chain:
            w = t(w)
        return w

    entries = read_manifest(manifest)
    _process_manifest(entries, _root(p, manifest), out, apply, "transformed.lst")
    print(f"transformed {len(entries)} files into {out}")


COMMANDS = {
    "synth-corpus": cmd_synth_corpus,
    "train-encoder": cmd_train_encoder,
    "train-generator": cmd_train_generator,
    "anonymize": cmd_anonymize,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "make-trials": cmd_make_trials,
    "transform": cmd_transform,
}


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file; flat keys or a section named after the command")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="fresh run directory (default runs/<command>-<time>)")
    common.add_argument("--device", help="torch device; only cpu is supported")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="voxveil", description="Speaker anonymization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    s = add("synth-corpus", "write a synthetic toy corpus with train/test manifests")
    s.add_argument("--speakers", type=int)
    s.add_argument("--utts-per-speaker", type=int)
    s.add_argument("--test-per-speaker", type=int)

    s = add("train-encoder", "train the reference speaker encoder")
    s.add_argument("--train-manifest")
    s.add_argument("--heldout-manifest")
    s.add_argument("--root")
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)

    s = add("train-generator", "train the perturbation generator against a frozen encoder")
    s.add_argument("--encoder")
    s.add_argument("--train-manifest")
    s.add_argument("--root")
    s.add_argument("--ablation", choices=["none", "no-bm"])
    s.add_argument("--preset", choices=["desk", "paper"])
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--peak-lr", type=float)
    s.add_argument("--resume", action="store_true", default=None)

    s = add("anonymize", "anonymize every file of a manifest")
    s.add_argument("--generator")
    s.add_argument("--manifest")
    s.add_argument("--root")

    s = add("attack", "run an FGSM-family attack on every file of a manifest")
    s.add_argument("--method", choices=["fgsm", "i-fgsm", "mi-fgsm", "gra"])
    s.add_argument("--encoder")
    s.add_argument("--manifest")
    s.add_argument("--root")
    s.add_argument("--epsilon", type=float)
    s.add_argument("--step-size", type=float)
    s.add_argument("--momentum", type=float)
    s.add_argument("--iterations", type=int)

    s = add("evaluate", "score a protocol and report its EER")
    s.add_argument("--protocol", choices=["original", "de-id", "unlinkability"])
    s.add_argument("--encoder")
    s.add_argument("--manifest")
    s.add_argument("--root")
    s.add_argument("--trials")
    s.add_argument("--generator")
    s.add_argument("--attack", choices=["fgsm", "i-fgsm", "mi-fgsm"])
    s.add_argument("--transform", action="append", default=[], help="applied in order, e.g. median-smooth:3")
    s.add_argument("--max-per-class", type=int)

    s = add("make-trials", "write a balanced trial list")
    s.add_argument("--protocol", choices=["original", "de-id", "unlinkability"])
    s.add_argument("--manifest")
    s.add_argument("--root")
    s.add_argument("--max-per-class", type=int)

    s = add("transform", "apply a transform chain to every file of a manifest")
    s.add_argument("--chain", action="append", default=[], help="repeatable, applied in order")
    s.add_argument("--manifest")
    s.add_argument("--root")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "seed", "out", "device", "verbose")}
    try:
        cfg = resolve_config(args.command, flags, args.config, args.seed, args.device)
        if cfg.device != "cpu":
            raise CliError(f"device {cfg.device!r} is not supported; use cpu")
        out = _fresh_dir(args.out, args.command, allow_existing=bool(cfg.params.get("resume")))
        cfg.dump(out / "run_config.yaml")
        torch.manual_seed(cfg.seed)
        np.random.seed(cfg.seed)
        COMMANDS[args.command](cfg, out)
    except (CliError, FileNotFoundError, ValueError, NotImplementedError, RuntimeError, KeyError) as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"voxveil {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
