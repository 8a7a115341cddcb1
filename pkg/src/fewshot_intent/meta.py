"""Episodic meta-training and episode-based evaluation."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .dataset import PooledFeatures, frame_logvar, load_pooled, mean_pool
from .encoder import EncoderParams, encode_backward, encode_pooled, init_encoder, save_checkpoint
from .errors import InputError, NumericalError
from .learners import LearnerConfig, learner_backward, learner_forward
from .protocol import Episode, EpisodeSpec, SplitAssignment, generate_episode

log = logging.getLogger(__name__)

WORKER_NAMES = ("frame_mean", "frame_logvar")
MIN_TEMPERATURE = 1e-4


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    idx = np.arange(len(labels))
    loss = -np.mean(np.log(p[idx, labels]))
    grad = p.copy()
    grad[idx, labels] -= 1.0
    return float(loss), grad / len(labels)


def accuracy(logits, labels) -> float:
    # np.argmax returns the lowest index among ties
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# -- self-supervised workers ----------------------------------------------------


@dataclass
class Worker:
    name: str
    W: np.ndarray
    b: np.ndarray

    @property
    def target_dim(self) -> int:
        return self.W.shape[0]


def worker_target(name: str, frames) -> np.ndarray:
    """Target vector a worker reconstructs for one utterance's frames."""
    if name == "frame_mean":
        return mean_pool(frames)
    if name == "frame_logvar":
        return frame_logvar(frames)
    raise InputError(f"unknown worker {name!r}, expected one of {WORKER_NAMES}")


def _targets(name, features: PooledFeatures, rows):
    if name == "frame_mean":
        return features.pooled[rows]
    if name == "frame_logvar":
        return features.logvar[rows]
    raise InputError(f"unknown worker {name!r}")


def make_workers(names, feature_dim: int, embedding_dim: int, seed: int = 0) -> list[Worker]:
    workers = []
    for i, name in enumerate(names):
        if name not in WORKER_NAMES:
            raise InputError(f"unknown worker {name!r}, expected one of {WORKER_NAMES}")
        bound = np.sqrt(6.0 / (feature_dim + embedding_dim))
        W = rng.stream(seed, rng.WORKER_INIT, i).uniform(-bound, bound, size=(feature_dim, embedding_dim))
        workers.append(Worker(name, W, np.zeros(feature_dim)))
    return workers


def worker_losses(workers, embeddings, features, rows):
    """Sum of per-worker mean squared errors, with gradients for embeddings and regressors."""
    total = 0.0
    d_emb = np.zeros_like(embeddings)
    grads = {}
    for w in workers:
        target = _targets(w.name, features, rows)
        resid = embeddings @ w.W.T + w.b - target
        total += float(np.mean(resid**2))
        g = 2.0 * resid / resid.size
        d_emb += g @ w.W
        grads[w.name] = (g.T @ embeddings, g.sum(axis=0))
    return total, d_emb, grads


# -- model and optimizer --------------------------------------------------------


@dataclass
class Model:
    encoder: EncoderParams
    temperature: float
    workers: list[Worker] = field(default_factory=list)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"W": self.encoder.W, "b": self.encoder.b, "temperature": np.array([self.temperature])}
        for w in self.workers:
            out[f"worker/{w.name}/W"] = w.W
            out[f"worker/{w.name}/b"] = w.b
        return out

    def assign(self, tensors):
        self.encoder.W = tensors["W"]
        self.encoder.b = tensors["b"]
        self.temperature = max(float(tensors["temperature"][0]), MIN_TEMPERATURE)
        for w in self.workers:
            w.W = tensors[f"worker/{w.name}/W"]
            w.b = tensors[f"worker/{w.name}/b"]

    def learner(self, cfg: LearnerConfig) -> LearnerConfig:
        return dataclasses.replace(cfg, temperature=self.temperature)


@dataclass
class OptimizerState:
    """SGD with (Nesterov) momentum; velocities are kept in parameter units."""

    lr: float
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> dict:
        new = {}
        for key, p in params.items():
            g = grads[key]
            if self.weight_decay and key != "temperature":
                g = g + self.weight_decay * p
            v = self.velocity.get(key)
            v = -self.lr * g if v is None else self.momentum * v - self.lr * g
            self.velocity[key] = v
            if self.nesterov:
                new[key] = p + self.momentum * v - self.lr * g
            else:
                new[key] = p + v
        return new


# -- episodes -------------------------------------------------------------------


@dataclass
class EpisodeResult:
    loss: float
    accuracy: float
    grads: dict


def _episode_rows(episode: Episode, features: PooledFeatures):
    return features.rows([r for r, _ in episode.support] + [r for r, _ in episode.query])


def episode_loss(encoder: EncoderParams, learner_cfg: LearnerConfig, episode: Episode, features: PooledFeatures) -> EpisodeResult:
    """Cross-entropy of one episode's query predictions and gradients for W, b, temperature."""
    rows = _episode_rows(episode, features)
    emb, cache = encode_pooled(encoder, features.pooled[rows])
    n_s = len(episode.support)
    ys, yq = episode.support_labels, episode.query_labels
    out = learner_forward(learner_cfg, emb[:n_s], ys, emb[n_s:], episode.spec.n_way)
    loss, g_logits = softmax_cross_entropy(out.logits, yq)
    dS, dQ, d_temp = learner_backward(learner_cfg.kind, out.state, g_logits)
    enc = encode_backward(cache, np.vstack([dS, dQ]))
    return EpisodeResult(loss, accuracy(out.logits, yq), {"W": enc.dW, "b": enc.db, "temperature": np.array([d_temp])})


def train_batch(model: Model, learner_cfg: LearnerConfig, episodes, optimizer: OptimizerState, features: PooledFeatures, alpha: float = 1.0) -> float:
    """One optimizer step on the mean loss of ``episodes``; returns the mean total loss."""
    if not episodes:
        raise InputError("train_batch needs at least one episode")
    if not 0.0 <= alpha <= 1.0:
        raise InputError("alpha must lie in [0, 1]")
    cfg = model.learner(learner_cfg)
    results = [episode_loss(model.encoder, cfg, ep, features) for ep in episodes]
    for i, r in enumerate(results):
        if not np.isfinite(r.loss):
            raise NumericalError(f"non-finite loss in episode {i} of batch (learner {cfg.kind})")
    k = len(results)
    meta_loss = sum(r.loss for r in results) / k
    grads = {key: sum(r.grads[key] for r in results) / k for key in ("W", "b", "temperature")}

    total = meta_loss
    if model.workers and alpha < 1.0:
        rows = np.concatenate([_episode_rows(ep, features) for ep in episodes])
        emb, cache = encode_pooled(model.encoder, features.pooled[rows])
        w_loss, d_emb, w_grads = worker_losses(model.workers, emb, features, rows)
        enc = encode_backward(cache, d_emb)
        total = alpha * meta_loss + (1.0 - alpha) * w_loss
        grads = {key: alpha * g for key, g in grads.items()}
        grads["W"] = grads["W"] + (1.0 - alpha) * enc.dW
        grads["b"] = grads["b"] + (1.0 - alpha) * enc.db
        for name, (gW, gb) in w_grads.items():
            grads[f"worker/{name}/W"] = (1.0 - alpha) * gW
            grads[f"worker/{name}/b"] = (1.0 - alpha) * gb
    else:
        for w in model.workers:
            grads[f"worker/{w.name}/W"] = np.zeros_like(w.W)
            grads[f"worker/{w.name}/b"] = np.zeros_like(w.b)
    if not np.isfinite(total):
        raise NumericalError(f"non-finite total loss (learner {cfg.kind})")

    params = model.tensors()
    if model.workers and alpha >= 1.0:
        # workers are not trained when their loss weight is zero
        params = {k: v for k, v in params.items() if not k.startswith("worker/")}
    model.assign({**model.tensors(), **optimizer.step(params, grads)})
    return float(total)


# -- evaluation -----------------------------------------------------------------


@dataclass
class EvalReport:
    n_way: int
    m_shot: int
    q_query: int
    n_episodes: int
    mean_accuracy: float
    std_accuracy: float
    ci95_halfwidth: float
    per_episode_accuracies: list[float] | None = None

    @classmethod
    def from_accuracies(cls, spec: EpisodeSpec, accs, keep: bool = False) -> EvalReport:
        accs = np.asarray(accs, dtype=np.float64)
        n = len(accs)
        std = float(accs.std(ddof=1)) if n > 1 else 0.0
        return cls(
            n_way=spec.n_way,
            m_shot=spec.m_shot,
            q_query=spec.q_query,
            n_episodes=n,
            mean_accuracy=float(accs.mean()),
            std_accuracy=std,
            ci95_halfwidth=1.96 * std / np.sqrt(n),
            per_episode_accuracies=[float(a) for a in accs] if keep else None,
        )

    def to_json(self, **extra) -> dict:
        doc = dataclasses.asdict(self)
        if doc["per_episode_accuracies"] is None:
            del doc["per_episode_accuracies"]
        doc.update(extra)
        return doc


def embed_split(encoder: EncoderParams, features: PooledFeatures):
    """Embed every pooled row once; evaluation never changes the encoder."""
    emb, _ = encode_pooled(encoder, features.pooled)
    return emb


def episode_logits(emb, features: PooledFeatures, learner_cfg: LearnerConfig, episode: Episode):
    s_rows = features.rows([r for r, _ in episode.support])
    q_rows = features.rows([r for r, _ in episode.query])
    out = learner_forward(learner_cfg, emb[s_rows], episode.support_labels, emb[q_rows], episode.spec.n_way)
    return out.logits


def evaluate(
    encoder: EncoderParams,
    learner_cfg: LearnerConfig,
    split: SplitAssignment,
    spec: EpisodeSpec,
    n_episodes: int = 2000,
    seed: int = 0,
    features: PooledFeatures | None = None,
    permute_labels: bool = False,
    keep_episodes: bool = False,
    threads: int = 1,
) -> EvalReport:
    """Mean query accuracy over seeded episodes with a frozen encoder.

    Episode ``i`` is drawn from ``rng.stream(seed, EVAL, i)`` so the report does
    not depend on ``threads``.  ``permute_labels`` shuffles each episode's query
    labels to measure chance level.
    """
    spec.check_feasible(split)
    if features is None:
        features = load_pooled(split.retained[spec.split])
    emb = embed_split(encoder, features)

    def one(i):
        gen = rng.stream(seed, rng.EVAL, i)
        ep = generate_episode(split, spec, gen)
        logits = episode_logits(emb, features, learner_cfg, ep)
        labels = ep.query_labels
        if permute_labels:
            labels = labels[gen.permutation(len(labels))]
        return accuracy(logits, labels)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            accs = list(pool.map(one, range(n_episodes)))
    else:
        accs = [one(i) for i in range(n_episodes)]
    return EvalReport.from_accuracies(spec, accs, keep_episodes)


# -- training loop --------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    episodes_per_epoch: int = 1000
    episodes_per_batch: int = 8
    n_way_train: int = 5
    m_shot_train: int = 15
    q_query_train: int | None = None
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    lr: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    lr_decay_every: int = 20
    lr_decay_factor: float = 0.1
    weight_decay: float = 5e-4
    alpha: float = 1.0
    workers: tuple[str, ...] = WORKER_NAMES
    embedding_dim: int = 50
    relu: bool = False
    val_episodes: int = 2000
    n_way_eval: int = 5
    m_shot_eval: int = 5
    q_query_eval: int | None = None
    seed: int = 0

    def validate(self):
        for name in ("epochs", "episodes_per_epoch", "episodes_per_batch", "lr_decay_every", "embedding_dim", "val_episodes"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be positive")
        if self.episodes_per_epoch % self.episodes_per_batch:
            raise InputError("episodes_per_epoch must be divisible by episodes_per_batch")
        if not 0.0 <= self.alpha <= 1.0:
            raise InputError("alpha must lie in [0, 1]")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0 or self.lr_decay_factor <= 0:
            raise InputError("lr, momentum, weight_decay must be nonnegative and lr_decay_factor positive")
        for name in self.workers:
            if name not in WORKER_NAMES:
                raise InputError(f"unknown worker {name!r}")
        self.train_spec()
        self.eval_spec("val")

    def train_spec(self) -> EpisodeSpec:
        return EpisodeSpec(self.n_way_train, self.m_shot_train, self.q_query_train, "train")

    def eval_spec(self, split: str) -> EpisodeSpec:
        return EpisodeSpec(self.n_way_eval, self.m_shot_eval, self.q_query_eval, split)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        return self.lr * self.lr_decay_factor ** ((epoch - 1) // self.lr_decay_every)


@dataclass
class TrainResult:
    log: list[dict]
    best_epoch: int
    best_val: float
    checkpoint: Path
    model: Model


def init_model(cfg: TrainConfig, feature_dim: int) -> Model:
    encoder = init_encoder(feature_dim, cfg.embedding_dim, cfg.seed, cfg.relu)
    workers = make_workers(cfg.workers, feature_dim, cfg.embedding_dim, cfg.seed) if cfg.alpha < 1.0 else []
    return Model(encoder, cfg.learner.temperature, workers)


def run_training(split: SplitAssignment, cfg: TrainConfig, out_dir, features: PooledFeatures | None = None) -> TrainResult:
    """Meta-train, validating after every epoch and checkpointing the best epoch.

    Writes ``train_log.jsonl`` and ``best.ckpt`` into ``out_dir``.
    """
    cfg.validate()
    train_spec = cfg.train_spec()
    val_spec = cfg.eval_spec("val")
    train_spec.check_feasible(split)
    val_spec.check_feasible(split)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if features is None:
        features = load_pooled(split.retained["train"] + split.retained["val"])

    model = init_model(cfg, split.manifest.feature_dim)
    opt = OptimizerState(cfg.lr, cfg.momentum, cfg.nesterov, cfg.weight_decay)
    ckpt = out_dir / "best.ckpt"
    log_path = out_dir / "train_log.jsonl"
    entries = []
    best_val, best_epoch = -1.0, 0
    episode_index = 0
    with open(log_path, "w", encoding="utf-8") as fh:
        for epoch in range(1, cfg.epochs + 1):
            start = time.perf_counter()
            opt.lr = cfg.lr_at(epoch)
            losses = []
            for _ in range(cfg.episodes_per_epoch // cfg.episodes_per_batch):
                batch = []
                for _ in range(cfg.episodes_per_batch):
                    batch.append(generate_episode(split, train_spec, rng.stream(cfg.seed, rng.TRAIN, episode_index)))
                    episode_index += 1
                losses.append(train_batch(model, cfg.learner, batch, opt, features, cfg.alpha))
            report = evaluate(model.encoder, model.learner(cfg.learner), split, val_spec, cfg.val_episodes, cfg.seed, features)
            entry = {
                "epoch": epoch,
                "lr": opt.lr,
                "train_loss": float(np.mean(losses)),
                "val_mean": report.mean_accuracy,
                "val_std": report.std_accuracy,
                "val_ci95": report.ci95_halfwidth,
                "wall_ms": round(1000 * (time.perf_counter() - start), 3),
            }
            entries.append(entry)
            fh.write(json.dumps(entry) + "\n")
            fh.flush()
            log.info("epoch %d lr %.4g loss %.4f val %.4f +- %.4f", epoch, opt.lr, entry["train_loss"], report.mean_accuracy, report.ci95_halfwidth)
            if report.mean_accuracy > best_val:
                best_val, best_epoch = report.mean_accuracy, epoch
                save_checkpoint(ckpt, model.encoder, model.temperature, model.workers if cfg.alpha < 1.0 else None)
    return TrainResult(entries, best_epoch, best_val, ckpt, model)
