"""Trainable embedding head: mean-pool frames, then an affine projection.

Because the projection is linear, projecting every frame and then pooling is
the same as pooling first; the forward pass pools first.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .dataset import mean_pool
from .errors import InputError

CKPT_MAGIC = b"FSCK"
CKPT_VERSION = 1
CKPT_HEADER = struct.Struct("<4sIII")


@dataclass
class EncoderParams:
    W: np.ndarray
    b: np.ndarray
    relu: bool = False

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise InputError(f"inconsistent encoder shapes W{self.W.shape} b{self.b.shape}")

    @property
    def embedding_dim(self) -> int:
        return self.W.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W.shape[1]

    def copy(self) -> EncoderParams:
        return EncoderParams(self.W.copy(), self.b.copy(), self.relu)


@dataclass
class EncoderGradients:
    dW: np.ndarray
    db: np.ndarray


@dataclass
class ForwardCache:
    pooled: np.ndarray
    # pre-activation, kept only when the ReLU is enabled
    pre: np.ndarray | None = None

    @property
    def batch_size(self) -> int:
        return self.pooled.shape[0]


def init_encoder(feature_dim: int = 256, embedding_dim: int = 50, seed: int = 0, relu: bool = False) -> EncoderParams:
    if feature_dim < 1 or embedding_dim < 1:
        raise InputError("encoder dimensions must be positive")
    bound = np.sqrt(6.0 / (feature_dim + embedding_dim))
    W = rng.stream(seed, rng.ENCODER_INIT).uniform(-bound, bound, size=(embedding_dim, feature_dim))
    return EncoderParams(W, np.zeros(embedding_dim), relu)


def encode_pooled(params: EncoderParams, pooled) -> tuple[np.ndarray, ForwardCache]:
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.ndim != 2 or pooled.shape[1] != params.feature_dim:
        raise InputError(f"expected pooled inputs with {params.feature_dim} columns, got shape {pooled.shape}")
    pre = pooled @ params.W.T + params.b
    if params.relu:
        return np.maximum(pre, 0.0), ForwardCache(pooled, pre)
    return pre, ForwardCache(pooled)


def encode(params: EncoderParams, frames) -> tuple[np.ndarray, ForwardCache]:
    """Embed a list of frame matrices, one embedding row per utterance."""
    pooled = []
    for i, m in enumerate(frames):
        m = np.asarray(m)
        if m.ndim != 2 or m.shape[1] != params.feature_dim:
            raise InputError(f"utterance {i}: expected {params.feature_dim} columns, got shape {m.shape}")
        pooled.append(mean_pool(m))
    return encode_pooled(params, np.array(pooled).reshape(len(pooled), params.feature_dim))


def encode_backward(cache: ForwardCache, grad_embeddings) -> EncoderGradients:
    """Gradients summed (not averaged) over the batch."""
    g = np.asarray(grad_embeddings, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != cache.batch_size:
        raise InputError(f"gradient batch {g.shape} does not match cache batch {cache.batch_size}")
    if cache.pre is not None:
        g = g * (cache.pre > 0)
    return EncoderGradients(dW=g.T @ cache.pooled, db=g.sum(axis=0))


def save_checkpoint(path, params: EncoderParams, temperature: float, workers=None):
    """Write the binary checkpoint; worker regressors are appended when given."""
    ed, fd = params.W.shape
    parts = [
        CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, fd, ed),
        params.W.astype("<f4").tobytes(),
        params.b.astype("<f4").tobytes(),
        struct.pack("<f", temperature),
    ]
    if workers:
        parts.append(struct.pack("<I", len(workers)))
        for w in workers:
            name = w.name.encode("utf-8")
            out_dim, in_dim = w.W.shape
            parts.append(struct.pack("<III", len(name), out_dim, in_dim) + name)
            parts.append(w.W.astype("<f4").tobytes())
            parts.append(w.b.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, relu: bool = False):
    """Return ``(params, temperature, worker_tensors)``.

    ``worker_tensors`` is a list of ``(name, W, b)``; empty when absent.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < CKPT_HEADER.size:
        raise InputError(f"{path}: truncated checkpoint")
    magic, version, fd, ed = CKPT_HEADER.unpack_from(data)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise InputError(f"{path}: not a version-{CKPT_VERSION} checkpoint")
    off = CKPT_HEADER.size
    need = off + 4 * (ed * fd + ed + 1)
    if len(data) < need:
        raise InputError(f"{path}: truncated checkpoint")
    W = np.frombuffer(data, "<f4", ed * fd, off).reshape(ed, fd)
    off += 4 * ed * fd
    b = np.frombuffer(data, "<f4", ed, off)
    off += 4 * ed
    (temperature,) = struct.unpack_from("<f", data, off)
    off += 4
    workers = []
    if off < len(data):
        try:
            (count,) = struct.unpack_from("<I", data, off)
            off += 4
            for _ in range(count):
                n, out_dim, in_dim = struct.unpack_from("<III", data, off)
                off += 12
                name = data[off : off + n].decode("utf-8")
                off += n
                wW = np.frombuffer(data, "<f4", out_dim * in_dim, off).reshape(out_dim, in_dim)
                off += 4 * out_dim * in_dim
                wb = np.frombuffer(data, "<f4", out_dim, off)
                off += 4 * out_dim
                workers.append((name, wW.astype(np.float64), wb.astype(np.float64)))
        except (struct.error, ValueError, UnicodeDecodeError):
            raise InputError(f"{path}: corrupt worker section") from None
        if off != len(data):
            raise InputError(f"{path}: {len(data) - off} trailing bytes")
    params = EncoderParams(W.astype(np.float64), b.astype(np.float64), relu)
    if not (np.all(np.isfinite(params.W)) and np.all(np.isfinite(params.b)) and np.isfinite(temperature)):
        raise InputError(f"{path}: non-finite checkpoint values")
    return params, float(temperature), workers
