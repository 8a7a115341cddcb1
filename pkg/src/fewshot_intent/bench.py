"""Supervised reference points: m-shot baseline and all-shot skyline.

Both train a one-hidden-layer ReLU MLP on pooled features with plain
mini-batch SGD on cross-entropy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .dataset import PooledFeatures, load_pooled
from .errors import InputError
from .meta import EvalReport, accuracy, softmax_cross_entropy
from .protocol import EpisodeSpec, SplitAssignment, generate_episode


@dataclass
class MlpParams:
    layers: list[tuple[np.ndarray, np.ndarray]]
    classes: list[str]

    def copy(self) -> MlpParams:
        return MlpParams([(W.copy(), b.copy()) for W, b in self.layers], list(self.classes))


def init_mlp(dims, seed: int, classes) -> MlpParams:
    gen = rng.stream(seed, rng.BENCH, 0)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((gen.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return MlpParams(layers, list(classes))


def mlp_forward(params: MlpParams, X):
    acts = [np.asarray(X, dtype=np.float64)]
    for i, (W, b) in enumerate(params.layers):
        z = acts[-1] @ W.T + b
        acts.append(np.maximum(z, 0.0) if i < len(params.layers) - 1 else z)
    return acts


def mlp_backward(params: MlpParams, acts, g_out):
    grads = []
    g = g_out
    for i in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[i]
        grads.append((g.T @ acts[i], g.sum(axis=0)))
        if i:
            g = (g @ W) * (acts[i] > 0)
    return grads[::-1]


def select_shots(records, classes, shots, seed: int):
    """Pick ``shots`` records per class (``None`` = all), in class order."""
    by_class = {c: [] for c in classes}
    for r in records:
        if r.label in by_class:
            by_class[r.label].append(r)
    gen = rng.stream(seed, rng.BENCH, 1)
    out = []
    for c in classes:
        recs = by_class[c]
        if shots is None:
            if not recs:
                raise InputError(f"class {c!r} has no records")
            out.extend(recs)
            continue
        if len(recs) < shots:
            raise InputError(f"class {c!r} has {len(recs)} records, baseline needs {shots}")
        out.extend(recs[i] for i in gen.permutation(len(recs))[:shots])
    return out


def train_supervised(
    X,
    labels,
    classes,
    epochs: int = 100,
    lr: float = 0.01,
    seed: int = 0,
    hidden: int = 50,
    batch_size: int = 8,
) -> tuple[MlpParams, float]:
    """Train on pooled features ``X`` with integer ``labels``; returns params and final loss."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(X) == 0 or len(X) != len(labels):
        raise InputError("need a nonempty training set with one label per row")
    params = init_mlp([X.shape[1], hidden, len(classes)], seed, classes)
    for epoch in range(epochs):
        order = rng.stream(seed, rng.BENCH, 2, epoch).permutation(len(X))
        for start in range(0, len(X), batch_size):
            idx = order[start : start + batch_size]
            acts = mlp_forward(params, X[idx])
            _, g = softmax_cross_entropy(acts[-1], labels[idx])
            grads = mlp_backward(params, acts, g)
            params.layers = [(W - lr * gW, b - lr * gb) for (W, b), (gW, gb) in zip(params.layers, grads)]
    loss, _ = softmax_cross_entropy(mlp_forward(params, X)[-1], labels)
    return params, loss


def eval_supervised(params: MlpParams, X, labels) -> float:
    return accuracy(mlp_forward(params, X)[-1], np.asarray(labels, dtype=np.int64))


def label_indices(records, classes):
    index = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([index[r.label] for r in records], dtype=np.int64)
    except KeyError as exc:
        raise InputError(f"record label {exc.args[0]!r} is not one of the trained classes") from None


def evaluate_records(params: MlpParams, records, features: PooledFeatures) -> float:
    return eval_supervised(params, features.pooled[features.rows(records)], label_indices(records, params.classes))


@dataclass
class BenchConfig:
    hidden: int = 50
    lr: float = 0.01
    baseline_epochs: int = 100
    skyline_epochs: int = 30
    batch_size: int = 8
    baseline_draws: int = 20
    skyline_holdout: float = 0.2


def run_baseline(
    split: SplitAssignment,
    spec: EpisodeSpec,
    cfg: BenchConfig = BenchConfig(),
    seed: int = 0,
    n_draws: int | None = None,
    features: PooledFeatures | None = None,
    episode_purpose: int = rng.EVAL,
) -> EvalReport:
    """Train an MLP on each episode's support set and score its query set.

    Episodes are drawn exactly as :func:`meta.evaluate` draws them for the same
    ``seed``, so baseline and meta-learner scores are paired.
    """
    n_draws = cfg.baseline_draws if n_draws is None else n_draws
    spec.check_feasible(split)
    if features is None:
        features = load_pooled(split.retained[spec.split])
    accs = []
    for i in range(n_draws):
        ep = generate_episode(split, spec, rng.stream(seed, episode_purpose, i))
        s_rows = features.rows([r for r, _ in ep.support])
        q_rows = features.rows([r for r, _ in ep.query])
        params, _ = train_supervised(
            features.pooled[s_rows], ep.support_labels, ep.class_names,
            cfg.baseline_epochs, cfg.lr, seed + i, cfg.hidden, cfg.batch_size,
        )
        accs.append(eval_supervised(params, features.pooled[q_rows], ep.query_labels))
    return EvalReport.from_accuracies(spec, accs)


def run_skyline(
    split: SplitAssignment,
    which: str = "test",
    cfg: BenchConfig = BenchConfig(),
    seed: int = 0,
    features: PooledFeatures | None = None,
    classes=None,
) -> tuple[float, MlpParams]:
    """Train on all but a held-out fraction of every class's records; return held-out accuracy."""
    classes = sorted(split.classes(which)) if classes is None else list(classes)
    records = [r for r in split.retained[which] if r.label in set(classes)]
    if features is None:
        features = load_pooled(records)
    gen = rng.stream(seed, rng.BENCH, 3)
    train, held = [], []
    for c in classes:
        recs = [r for r in records if r.label == c]
        if len(recs) < 2:
            raise InputError(f"class {c!r} needs at least 2 records for a skyline hold-out")
        n_held = max(1, int(round(cfg.skyline_holdout * len(recs))))
        perm = gen.permutation(len(recs))
        held.extend(recs[i] for i in perm[:n_held])
        train.extend(recs[i] for i in perm[n_held:])
    params, _ = train_supervised(
        features.pooled[features.rows(train)], label_indices(train, classes), classes,
        cfg.skyline_epochs, cfg.lr, seed, cfg.hidden, cfg.batch_size,
    )
    return evaluate_records(params, held, features), params
