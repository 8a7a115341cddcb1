"""Command-line interface.

Subcommands: synth, split, train, eval, baseline, skyline, confusion.
Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import typing
from pathlib import Path

import numpy as np

from . import rng
from .bench import BenchConfig, run_baseline, run_skyline
from .dataset import SyntheticSpec, generate_synthetic, load_manifest, load_pooled
from .encoder import load_checkpoint
from .errors import InputError, NumericalError
from .learners import LearnerConfig
from .meta import TrainConfig, evaluate, episode_logits, embed_split, run_training
from .protocol import PRESETS, EpisodeSpec, generate_episode, load_split, make_split, split_stats, format_stats

log = logging.getLogger("fewshot_intent")

CONFIG_SECTIONS = {"synthetic", "split", "train", "learner", "eval", "bench", "seed"}
SPLIT_KEYS = {"preset", "counts", "mode", "speaker_ratios"}
EVAL_KEYS = {"n_way", "m_shot", "q_query", "episodes", "split"}


# -- configuration --------------------------------------------------------------


def _build(cls, data: dict, section: str, skip=()):
    """Strictly construct dataclass ``cls`` from ``data``; unknown keys are errors."""
    if not isinstance(data, dict):
        raise InputError(f"config section {section!r} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    unknown = sorted(set(data) - names)
    if unknown:
        raise InputError(f"unknown key(s) in config section {section!r}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = str(hints.get(key, ""))
        if isinstance(value, list) and "tuple" in hint:
            value = tuple(value)
        elif value is not None and ("int" in hint and "float" not in hint) and (isinstance(value, bool) or not isinstance(value, int)):
            raise InputError(f"{section}.{key} must be an integer, got {value!r}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InputError(f"config section {section!r}: {exc}") from None


def _check_keys(data, allowed, section):
    if not isinstance(data, dict):
        raise InputError(f"config section {section!r} must be an object")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise InputError(f"unknown key(s) in config section {section!r}: {', '.join(unknown)}")
    return data


@dataclasses.dataclass
class RunConfig:
    synthetic: SyntheticSpec
    split: dict
    train: TrainConfig
    learner: LearnerConfig
    eval: dict
    bench: BenchConfig
    seed: int

    def to_json(self) -> dict:
        train = dataclasses.asdict(self.train)
        train.pop("learner")
        return {
            "seed": self.seed,
            "synthetic": dataclasses.asdict(self.synthetic),
            "split": self.split,
            "train": train,
            "learner": dataclasses.asdict(self.learner),
            "eval": self.eval,
            "bench": dataclasses.asdict(self.bench),
        }


def load_config(path, seed: int | None = None) -> RunConfig:
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from None
        _check_keys(data, CONFIG_SECTIONS, "<root>")
    if seed is None:
        seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise InputError(f"seed must be a 64-bit unsigned integer, got {seed!r}")
    learner = _build(LearnerConfig, data.get("learner", {}), "learner")
    train = _build(TrainConfig, data.get("train", {}), "train", skip=("learner", "seed"))
    train = dataclasses.replace(train, learner=learner, seed=seed)
    synthetic = _build(SyntheticSpec, data.get("synthetic", {}), "synthetic", skip=("seed",))
    synthetic = dataclasses.replace(synthetic, seed=seed)
    split = dict(_check_keys(data.get("split", {}), SPLIT_KEYS, "split"))
    ev = {"n_way": 5, "m_shot": 5, "q_query": None, "episodes": 2000, "split": "test"}
    ev.update(_check_keys(data.get("eval", {}), EVAL_KEYS, "eval"))
    bench = _build(BenchConfig, data.get("bench", {}), "bench")
    cfg = RunConfig(synthetic, split, train, learner, ev, bench, seed)
    synthetic.validate()
    train.validate()
    EpisodeSpec(ev["n_way"], ev["m_shot"], ev["q_query"], ev["split"])
    return cfg


# -- helpers --------------------------------------------------------------------


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=False) + "\n", encoding="utf-8")


def _eval_spec(cfg: RunConfig, args) -> EpisodeSpec:
    ev = cfg.eval
    n = args.n if args.n is not None else ev["n_way"]
    m = args.m if args.m is not None else ev["m_shot"]
    q = args.q if args.q is not None else ev["q_query"]
    which = args.which if args.which is not None else ev["split"]
    return EpisodeSpec(n, m, q, which)


def _learner(cfg: RunConfig, args, temperature=None) -> LearnerConfig:
    learner = cfg.learner
    if getattr(args, "learner", None):
        learner = dataclasses.replace(learner, kind=args.learner)
    if temperature is not None:
        learner = dataclasses.replace(learner, temperature=temperature)
    return learner


def _load_model(cfg, args, split):
    params, temperature, _ = load_checkpoint(args.ckpt, relu=cfg.train.relu)
    if params.feature_dim != split.manifest.feature_dim:
        raise InputError(
            f"checkpoint feature_dim {params.feature_dim} does not match split features {split.manifest.feature_dim}"
        )
    return params, temperature


# -- commands -------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig):
    spec = cfg.synthetic
    overrides = {
        "n_classes": args.classes,
        "utterances_per_class": args.per_class,
        "feature_dim": args.feature_dim,
        "n_speakers": args.speakers,
        "class_separation": args.separation,
        "signal_dim": args.signal_dim,
        "frames_range": tuple(args.frames) if args.frames else None,
    }
    spec = dataclasses.replace(spec, **{k: v for k, v in overrides.items() if v is not None})
    spec.validate()
    manifest = generate_synthetic(spec, args.out)
    _write_json(Path(args.out) / "synth_config.json", {"command": "synth", "seed": cfg.seed, "synthetic": dataclasses.asdict(spec)})
    print(f"wrote {len(manifest.records)} records, {len(manifest.classes)} classes to {manifest.path}")


def cmd_split(args, cfg: RunConfig):
    opts = dict(cfg.split)
    if args.preset:
        opts["preset"] = args.preset
    if args.counts:
        opts["counts"] = args.counts
    if args.mode:
        opts["mode"] = args.mode
    if args.speaker_ratios:
        opts["speaker_ratios"] = args.speaker_ratios
    counts = opts.get("counts")
    if counts is None:
        preset = opts.get("preset", "google-commands")
        if preset not in PRESETS:
            raise InputError(f"unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
        counts = PRESETS[preset]
    ratios = opts.get("speaker_ratios", (0.8, 0.1, 0.1))
    manifest = load_manifest(args.manifest)
    split = make_split(manifest, counts, opts.get("mode", "SPO"), cfg.seed, ratios)
    stats = split_stats(split)
    print(format_stats(stats))
    doc = split.to_json()
    doc["stats"] = stats
    doc["config"] = cfg.to_json()
    _write_json(args.out, doc)


def cmd_train(args, cfg: RunConfig):
    train = cfg.train
    overrides = {"epochs": args.epochs, "episodes_per_epoch": args.episodes_per_epoch, "episodes_per_batch": args.episodes_per_batch}
    train = dataclasses.replace(train, learner=_learner(cfg, args), **{k: v for k, v in overrides.items() if v is not None})
    train.validate()
    split = load_split(args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_json()
    resolved["train"].update({k: v for k, v in overrides.items() if v is not None})
    resolved["learner"] = dataclasses.asdict(train.learner)
    _write_json(out / "train_config.json", {"command": "train", "split": str(Path(args.split).resolve()), "config": resolved})
    result = run_training(split, train, out)
    print(f"best epoch {result.best_epoch}: val accuracy {result.best_val:.4f}; checkpoint {result.checkpoint}")


def cmd_eval(args, cfg: RunConfig):
    spec = _eval_spec(cfg, args)
    episodes = args.episodes if args.episodes is not None else cfg.eval["episodes"]
    split = load_split(args.split)
    params, temperature = _load_model(cfg, args, split)
    learner = _learner(cfg, args, temperature)
    report = evaluate(params, learner, split, spec, episodes, cfg.seed, permute_labels=args.permute_labels, threads=args.threads)
    doc = report.to_json(split=spec.split, seed=cfg.seed, learner=dataclasses.asdict(learner), checkpoint=str(args.ckpt), config=cfg.to_json())
    print(f"{spec.n_way}-way {spec.m_shot}-shot {learner.kind}: {100 * report.mean_accuracy:.2f} +- {100 * report.ci95_halfwidth:.2f} (std {100 * report.std_accuracy:.2f}) over {episodes} episodes")
    if args.out:
        _write_json(args.out, doc)
    else:
        print(json.dumps(doc, indent=1))


def cmd_baseline(args, cfg: RunConfig):
    spec = _eval_spec(cfg, args)
    split = load_split(args.split)
    draws = args.draws if args.draws is not None else cfg.bench.baseline_draws
    report = run_baseline(split, spec, cfg.bench, cfg.seed, draws)
    doc = report.to_json(mode="baseline", split=spec.split, seed=cfg.seed, config=cfg.to_json())
    print(f"baseline {spec.n_way}-way {spec.m_shot}-shot: {100 * report.mean_accuracy:.2f} +- {100 * report.std_accuracy:.2f} (std) over {draws} draws")
    _write_json(args.out, doc)


def cmd_skyline(args, cfg: RunConfig):
    which = args.which or cfg.eval["split"]
    split = load_split(args.split)
    acc, params = run_skyline(split, which, cfg.bench, cfg.seed)
    n = len(params.classes)
    doc = {
        "n_way": n, "m_shot": None, "q_query": None, "n_episodes": 1,
        "mean_accuracy": acc, "std_accuracy": 0.0, "ci95_halfwidth": 0.0,
        "mode": "skyline", "split": which, "classes": params.classes, "seed": cfg.seed, "config": cfg.to_json(),
    }
    print(f"skyline {n}-way on {which}: {100 * acc:.2f}")
    _write_json(args.out, doc)


def confusion_matrix(params, learner, split, spec: EpisodeSpec, n_episodes: int, seed: int, features=None):
    """Row-normalized true-vs-predicted matrix averaged over episodes, in global class order."""
    spec.check_feasible(split)
    if features is None:
        features = load_pooled(split.retained[spec.split])
    names = split.classes(spec.split)
    index = {c: i for i, c in enumerate(names)}
    total = np.zeros((len(names), len(names)))
    seen = np.zeros(len(names))
    emb = embed_split(params, features)
    for i in range(n_episodes):
        ep = generate_episode(split, spec, rng.stream(seed, rng.EVAL, i))
        pred = np.argmax(episode_logits(emb, features, learner, ep), axis=1)
        local = np.zeros((spec.n_way, spec.n_way))
        np.add.at(local, (ep.query_labels, pred), 1.0)
        local /= local.sum(axis=1, keepdims=True)
        g = np.array([index[c] for c in ep.class_names])
        total[np.ix_(g, g)] += local
        seen[g] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        matrix = np.where(seen[:, None] > 0, total / np.maximum(seen, 1)[:, None], 0.0)
    return names, matrix


GNUPLOT = """\
# gnuplot -persist {name}.gp
set datafile separator ","
set title "confusion ({m}-shot, {episodes} episodes)"
set xlabel "predicted"
set ylabel "true"
set yrange [] reverse
set cbrange [0:1]
set palette grey negative
plot "{name}.csv" matrix rowheaders columnheaders with image notitle
"""


def cmd_confusion(args, cfg: RunConfig):
    split = load_split(args.split)
    which = args.which or "test"
    m = args.m if args.m is not None else cfg.eval["m_shot"]
    n = args.n if args.n is not None else len(split.classes(which))
    spec = EpisodeSpec(n, m, args.q, which)
    params, temperature = _load_model(cfg, args, split)
    learner = _learner(cfg, args, temperature)
    names, matrix = confusion_matrix(params, learner, split, spec, args.episodes, cfg.seed)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    _write_json(prefix.with_suffix(".json"), {
        "class_names": names, "counts": matrix.tolist(), "n_episodes": args.episodes,
        "n_way": n, "m_shot": m, "q_query": spec.q_query, "split": which,
        "learner": dataclasses.asdict(learner), "seed": cfg.seed, "config": cfg.to_json(),
    })
    with open(prefix.with_suffix(".csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("true\\pred," + ",".join(names) + "\n")
        for name, row in zip(names, matrix):
            fh.write(name + "," + ",".join(f"{v:.6f}" for v in row) + "\n")
    prefix.with_suffix(".gp").write_text(GNUPLOT.format(name=prefix.name, m=m, episodes=args.episodes), encoding="utf-8")
    print(f"diagonal mean {np.mean(np.diag(matrix)):.4f}; wrote {prefix}.json/.csv/.gp")


# -- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fewshot-intent", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic frame-feature corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--classes", type=int)
    sp.add_argument("--per-class", type=int)
    sp.add_argument("--feature-dim", type=int)
    sp.add_argument("--speakers", type=int)
    sp.add_argument("--separation", type=float)
    sp.add_argument("--signal-dim", type=int)
    sp.add_argument("--frames", type=int, nargs=2, metavar=("MIN", "MAX"))

    sp = add("split", cmd_split, "build a class-disjoint train/val/test protocol")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--preset", choices=sorted(PRESETS))
    sp.add_argument("--counts", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    sp.add_argument("--mode", help="SPO or NoSPO")
    sp.add_argument("--speaker-ratios", type=float, nargs=3)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "episodic meta-training")
    sp.add_argument("--split", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--learner", choices=("proto", "ridge", "svm"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--episodes-per-epoch", type=int)
    sp.add_argument("--episodes-per-batch", type=int)

    for name, fn, help in (("eval", cmd_eval, "episode-based evaluation of a checkpoint"),
                           ("baseline", cmd_baseline, "supervised m-shot baseline")):
        sp = add(name, fn, help)
        sp.add_argument("--split", required=True)
        sp.add_argument("--n", type=int)
        sp.add_argument("--m", type=int)
        sp.add_argument("--q", type=int)
        sp.add_argument("--which", choices=("train", "val", "test"))
        sp.add_argument("--out", required=(name == "baseline"))
        if name == "eval":
            sp.add_argument("--ckpt", required=True)
            sp.add_argument("--learner", choices=("proto", "ridge", "svm"))
            sp.add_argument("--episodes", type=int)
            sp.add_argument("--permute-labels", action="store_true", help="chance-level calibration")
        else:
            sp.add_argument("--draws", type=int)

    sp = add("skyline", cmd_skyline, "supervised all-shot skyline")
    sp.add_argument("--split", required=True)
    sp.add_argument("--which", choices=("train", "val", "test"))
    sp.add_argument("--out", required=True)

    sp = add("confusion", cmd_confusion, "confusion matrix over test episodes")
    sp.add_argument("--split", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--learner", choices=("proto", "ridge", "svm"))
    sp.add_argument("--n", type=int, help="ways per episode (default: every class of the split)")
    sp.add_argument("--m", type=int)
    sp.add_argument("--q", type=int)
    sp.add_argument("--which", choices=("train", "val", "test"))
    sp.add_argument("--episodes", type=int, default=1000)
    sp.add_argument("--out", required=True, help="output prefix for .json/.csv/.gp")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise InputError("--threads must be positive")
        cfg = load_config(args.config, args.seed)
        args.fn(args, cfg)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
