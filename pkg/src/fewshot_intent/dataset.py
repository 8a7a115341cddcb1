"""Manifests, binary frame-feature archives, and synthetic corpora.

Manifest: UTF-8 JSON lines with keys ``utterance_id``, ``speaker_id``, ``label``,
``feature_path`` (relative to the manifest directory), ``n_frames``, ``feature_dim``.

Feature archive (little endian)::

    b"FSFA" | u32 version=1 | u32 n_frames | u32 feature_dim | f32[n_frames * feature_dim]
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .errors import InputError

MAGIC = b"FSFA"
VERSION = 1
HEADER = struct.Struct("<4sIII")
MANIFEST_KEYS = ("utterance_id", "speaker_id", "label", "feature_path", "n_frames", "feature_dim")


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    label: str
    feature_path: Path
    n_frames: int
    feature_dim: int


@dataclass
class DatasetManifest:
    records: list[UtteranceRecord]
    path: Path | None = None
    classes: frozenset[str] = field(init=False)
    speakers: frozenset[str] = field(init=False)

    def __post_init__(self):
        if not self.records:
            raise InputError("manifest has no records")
        self.classes = frozenset(r.label for r in self.records)
        self.speakers = frozenset(r.speaker_id for r in self.records)

    @property
    def feature_dim(self) -> int:
        return self.records[0].feature_dim

    def by_id(self) -> dict[str, UtteranceRecord]:
        return {r.utterance_id: r for r in self.records}


@dataclass
class SyntheticSpec:
    n_classes: int = 28
    n_speakers: int = 20
    utterances_per_class: int = 40
    feature_dim: int = 256
    frames_range: tuple[int, int] = (50, 100)
    class_separation: float = 3.0
    # class means span a shared random subspace of this dimension (0 = full space);
    # clipped to feature_dim
    signal_dim: int = 8
    seed: int = 0

    def validate(self):
        for name in ("n_classes", "n_speakers", "utterances_per_class", "feature_dim"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be positive")
        lo, hi = self.frames_range
        if not 1 <= lo <= hi:
            raise InputError(f"invalid frames_range {self.frames_range}")
        if self.class_separation < 0:
            raise InputError("class_separation must be nonnegative")
        if self.signal_dim < 0:
            raise InputError("signal_dim must be nonnegative")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    base = path.parent
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("not a JSON object")
                missing = [k for k in MANIFEST_KEYS if k not in obj]
                if missing:
                    raise ValueError(f"missing keys {missing}")
                rec = UtteranceRecord(
                    utterance_id=str(obj["utterance_id"]),
                    speaker_id=str(obj["speaker_id"]),
                    label=str(obj["label"]),
                    feature_path=base / obj["feature_path"],
                    n_frames=_positive_int(obj["n_frames"], "n_frames"),
                    feature_dim=_positive_int(obj["feature_dim"], "feature_dim"),
                )
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: malformed record: {exc}") from None
            if rec.utterance_id in seen:
                raise InputError(f"{path}:{lineno}: duplicate utterance_id {rec.utterance_id!r}")
            if records and rec.feature_dim != records[0].feature_dim:
                raise InputError(
                    f"{path}:{lineno}: feature_dim {rec.feature_dim} differs from "
                    f"{records[0].feature_dim} in earlier records"
                )
            seen.add(rec.utterance_id)
            records.append(rec)
    return DatasetManifest(records, path=path)


def _positive_int(value, name):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return value


def write_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in manifest.records:
            rel = os.path.relpath(Path(r.feature_path).resolve(), base)
            obj = {
                "utterance_id": r.utterance_id,
                "speaker_id": r.speaker_id,
                "label": r.label,
                "feature_path": Path(rel).as_posix(),
                "n_frames": r.n_frames,
                "feature_dim": r.feature_dim,
            }
            fh.write(json.dumps(obj) + "\n")


def write_features(path, matrix):
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.size == 0:
        raise InputError(f"feature matrix must be a nonempty 2-D array, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise InputError("feature matrix contains non-finite values")
    n_frames, dim = matrix.shape
    payload = np.ascontiguousarray(matrix, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n_frames, dim))
        fh.write(payload)


def read_features(record: UtteranceRecord) -> np.ndarray:
    path = Path(record.feature_path)
    if not path.is_file():
        raise InputError(f"feature archive not found: {path}")
    data = path.read_bytes()
    if len(data) < HEADER.size:
        raise InputError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, n_frames, dim = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise InputError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise InputError(f"{path}: unsupported archive version {version}")
    if (n_frames, dim) != (record.n_frames, record.feature_dim):
        raise InputError(
            f"{path}: header shape ({n_frames}, {dim}) does not match record "
            f"({record.n_frames}, {record.feature_dim})"
        )
    expected = HEADER.size + 4 * n_frames * dim
    if len(data) < expected:
        raise InputError(f"{path}: truncated payload ({len(data)} of {expected} bytes)")
    if len(data) > expected:
        raise InputError(f"{path}: {len(data) - expected} trailing bytes")
    matrix = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(n_frames, dim)
    if not np.all(np.isfinite(matrix)):
        raise InputError(f"{path}: non-finite value in archive")
    return matrix.astype(np.float32)


def mean_pool(matrix) -> np.ndarray:
    """Mean over frames (rows), accumulated in float64."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        raise InputError(f"need at least one frame, got shape {matrix.shape}")
    return matrix.sum(axis=0, dtype=np.float64) / matrix.shape[0]


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write a Gaussian-cluster corpus and its manifest into ``out_dir``.

    Frames of class ``k`` are ``mu_k + eps`` with ``eps ~ N(0, I)``.  Class means
    are drawn in a random ``signal_dim``-dimensional subspace and scaled so the
    root-mean-square distance between two class means equals
    ``class_separation`` (frame noise has unit standard deviation).
    """
    spec.validate()
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    gen = rng.stream(spec.seed, rng.SYNTH)

    d = spec.feature_dim
    s = min(spec.signal_dim, d) or d
    basis, _ = np.linalg.qr(gen.standard_normal((d, s)))
    scale = spec.class_separation / np.sqrt(2.0 * s)
    means = gen.standard_normal((spec.n_classes, s)) @ basis.T * scale

    lo, hi = spec.frames_range
    records = []
    counter = 0
    for k in range(spec.n_classes):
        label = f"class{k:03d}"
        for j in range(spec.utterances_per_class):
            n_frames = int(gen.integers(lo, hi + 1))
            frames = (means[k] + gen.standard_normal((n_frames, d))).astype(np.float32)
            uid = f"{label}_{j:05d}"
            fpath = feat_dir / f"{uid}.fsfa"
            write_features(fpath, frames)
            speaker = f"spk{counter % spec.n_speakers:04d}"
            counter += 1
            records.append(UtteranceRecord(uid, speaker, label, fpath, n_frames, d))
    manifest = DatasetManifest(records, path=out_dir / "manifest.jsonl")
    write_manifest(manifest, manifest.path)
    return manifest


@dataclass
class PooledFeatures:
    """Pooled inputs and frame statistics for every record, indexed by utterance id."""

    index: dict[str, int]
    pooled: np.ndarray
    logvar: np.ndarray

    def rows(self, records) -> np.ndarray:
        return np.array([self.index[r.utterance_id] for r in records], dtype=np.int64)


def frame_logvar(matrix, eps: float = 1e-6) -> np.ndarray:
    """Elementwise log of the population variance across frames; zeros for a single frame."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape[0] < 2:
        return np.zeros(matrix.shape[1])
    return np.log(matrix.var(axis=0) + eps)


def load_pooled(records) -> PooledFeatures:
    records = list(records)
    index = {}
    pooled = []
    logvar = []
    for r in records:
        if r.utterance_id in index:
            continue
        frames = read_features(r)
        index[r.utterance_id] = len(pooled)
        pooled.append(mean_pool(frames))
        logvar.append(frame_logvar(frames))
    return PooledFeatures(index, np.array(pooled), np.array(logvar))
