"""Class-disjoint (optionally speaker-disjoint) splits and n-way m-shot episodes."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import rng
from .dataset import DatasetManifest, UtteranceRecord, load_manifest
from .errors import InputError

SPLITS = ("train", "val", "test")
SPO = "SPO"
NOSPO = "NoSPO"
PRESETS = {
    "google-commands": (18, 5, 5),
    "fluent": (15, 8, 8),
}
DEFAULT_SPEAKER_RATIOS = (0.8, 0.1, 0.1)


def parse_mode(mode: str) -> str:
    key = mode.replace("-", "").replace("_", "").lower()
    if key == "spo":
        return SPO
    if key == "nospo":
        return NOSPO
    raise InputError(f"unknown split mode {mode!r} (expected SPO or NoSPO)")


@dataclass(frozen=True)
class SplitAssignment:
    mode: str
    seed: int
    counts: tuple[int, int, int]
    class_split: dict[str, str]
    speaker_split: dict[str, str] | None
    retained: dict[str, list[UtteranceRecord]]
    manifest: DatasetManifest = field(repr=False, compare=False)
    speaker_ratios: tuple[float, float, float] | None = None

    def classes(self, split: str) -> list[str]:
        return sorted(c for c, s in self.class_split.items() if s == split)

    @cached_property
    def by_class(self) -> dict[str, dict[str, list[UtteranceRecord]]]:
        out = {s: {c: [] for c in self.classes(s)} for s in SPLITS}
        for s in SPLITS:
            for r in self.retained[s]:
                out[s][r.label].append(r)
        return out

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "counts": list(self.counts),
            "speaker_ratios": list(self.speaker_ratios) if self.speaker_ratios else None,
            "manifest": str(Path(self.manifest.path).resolve()) if self.manifest.path else None,
            "class_split": dict(sorted(self.class_split.items())),
            "speaker_split": dict(sorted(self.speaker_split.items())) if self.speaker_split else None,
            "retained": {s: [r.utterance_id for r in self.retained[s]] for s in SPLITS},
        }


def make_split(
    manifest: DatasetManifest,
    counts,
    mode: str = SPO,
    seed: int = 0,
    speaker_ratios=DEFAULT_SPEAKER_RATIOS,
) -> SplitAssignment:
    mode = parse_mode(mode)
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or min(counts) < 0:
        raise InputError(f"counts must be three nonnegative integers, got {counts}")
    classes = sorted(manifest.classes)
    if sum(counts) > len(classes):
        raise InputError(f"requested {sum(counts)} classes but manifest has only {len(classes)}")

    order = rng.stream(seed, rng.SPLIT, 0).permutation(len(classes))
    class_split = {}
    pos = 0
    for name, count in zip(SPLITS, counts):
        for i in order[pos : pos + count]:
            class_split[classes[i]] = name
        pos += count

    speaker_split = None
    if mode == NOSPO:
        speaker_split = _partition_speakers(sorted(manifest.speakers), speaker_ratios, seed)

    retained = {s: [] for s in SPLITS}
    for r in manifest.records:
        split = class_split.get(r.label)
        if split is None:
            continue
        if speaker_split is not None and speaker_split[r.speaker_id] != split:
            continue
        retained[split].append(r)

    if mode == NOSPO:
        kept = {(s, r.label) for s in SPLITS for r in retained[s]}
        for c, s in sorted(class_split.items()):
            if (s, c) not in kept:
                raise InputError(f"NoSPO split leaves class {c!r} ({s}) with no records from {s} speakers")

    return SplitAssignment(
        mode=mode,
        seed=seed,
        counts=counts,
        class_split=class_split,
        speaker_split=speaker_split,
        retained=retained,
        manifest=manifest,
        speaker_ratios=tuple(speaker_ratios) if mode == NOSPO else None,
    )


def _partition_speakers(speakers, ratios, seed):
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or np.any(ratios <= 0):
        raise InputError(f"speaker ratios must be three positive numbers, got {list(ratios)}")
    n = len(speakers)
    if n < 3:
        raise InputError(f"NoSPO needs at least 3 speakers, manifest has {n}")
    ratios = ratios / ratios.sum()
    # largest remainder, then make every split nonempty
    raw = ratios * n
    sizes = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[i] += 1
    while sizes.min() == 0:
        sizes[int(np.argmax(sizes))] -= 1
        sizes[int(np.argmin(sizes))] += 1
    order = rng.stream(seed, rng.SPLIT, 1).permutation(n)
    out = {}
    pos = 0
    for name, size in zip(SPLITS, sizes):
        for i in order[pos : pos + size]:
            out[speakers[i]] = name
        pos += size
    return out


def split_stats(split: SplitAssignment) -> dict[str, dict[str, int]]:
    return {
        s: {
            "classes": len(split.classes(s)),
            "audio_files": len(split.retained[s]),
            "speakers": len({r.speaker_id for r in split.retained[s]}),
        }
        for s in SPLITS
    }


def format_stats(stats) -> str:
    lines = [f"{'':<12}" + "".join(f"{s:>10}" for s in SPLITS)]
    for key, title in (("classes", "#Classes"), ("audio_files", "#Audio"), ("speakers", "#Speakers")):
        lines.append(f"{title:<12}" + "".join(f"{stats[s][key]:>10}" for s in SPLITS))
    return "\n".join(lines)


def save_split(split: SplitAssignment, path):
    Path(path).write_text(json.dumps(split.to_json(), indent=1) + "\n", encoding="utf-8")


def load_split(path, manifest: DatasetManifest | None = None) -> SplitAssignment:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"split file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        if manifest is None:
            manifest = load_manifest(doc["manifest"])
        by_id = manifest.by_id()
        retained = {s: [by_id[u] for u in doc["retained"][s]] for s in SPLITS}
        ratios = doc.get("speaker_ratios")
        return SplitAssignment(
            mode=parse_mode(doc["mode"]),
            seed=int(doc["seed"]),
            counts=tuple(doc["counts"]),
            class_split=dict(doc["class_split"]),
            speaker_split=dict(doc["speaker_split"]) if doc["speaker_split"] else None,
            retained=retained,
            manifest=manifest,
            speaker_ratios=tuple(ratios) if ratios else None,
        )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: malformed split file ({exc!r})") from None


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    m_shot: int = 5
    q_query: int | None = None
    split: str = "train"

    def __post_init__(self):
        if self.q_query is None:
            object.__setattr__(self, "q_query", self.m_shot)
        if self.split not in SPLITS:
            raise InputError(f"unknown split {self.split!r}")
        if self.n_way < 2:
            raise InputError(f"n_way must be at least 2, got {self.n_way}")
        if self.m_shot < 1 or self.q_query < 1:
            raise InputError("m_shot and q_query must be positive")

    def check_feasible(self, split: SplitAssignment):
        pool = split.by_class[self.split]
        if len(pool) < self.n_way:
            raise InputError(f"{self.split} split has {len(pool)} classes, episode needs {self.n_way}")
        need = self.m_shot + self.q_query
        worst = min(pool, key=lambda c: (len(pool[c]), c))
        if len(pool[worst]) < need:
            raise InputError(
                f"{self.split} split: class {worst!r} has {len(pool[worst])} records, "
                f"episode needs {need} per class"
            )


@dataclass
class Episode:
    spec: EpisodeSpec
    class_names: list[str]
    support: list[tuple[UtteranceRecord, int]]
    query: list[tuple[UtteranceRecord, int]]

    @property
    def support_labels(self) -> np.ndarray:
        return np.array([y for _, y in self.support], dtype=np.int64)

    @property
    def query_labels(self) -> np.ndarray:
        return np.array([y for _, y in self.query], dtype=np.int64)

    def to_json(self) -> dict:
        return {
            "class_names": self.class_names,
            "support": [r.utterance_id for r, _ in self.support],
            "query": [r.utterance_id for r, _ in self.query],
        }


def generate_episode(split: SplitAssignment, spec: EpisodeSpec, gen: np.random.Generator) -> Episode:
    """Sample one episode; classes and utterances are drawn without replacement."""
    spec.check_feasible(split)
    pool = split.by_class[spec.split]
    names = sorted(pool)
    need = spec.m_shot + spec.q_query
    class_names = [names[i] for i in gen.permutation(len(names))[: spec.n_way]]
    support, query = [], []
    for k, c in enumerate(class_names):
        recs = pool[c]
        picks = gen.permutation(len(recs))[:need]
        support.extend((recs[i], k) for i in picks[: spec.m_shot])
        query.extend((recs[i], k) for i in picks[spec.m_shot :])
    return Episode(spec, class_names, support, query)


def episode_stream(split, spec, seed, purpose=rng.EPISODE):
    """Yield episodes indexed from 0, each seeded by ``(seed, purpose, index)``."""
    i = 0
    while True:
        yield generate_episode(split, spec, rng.stream(seed, purpose, i))
        i += 1
