"""Dataset handles, external ingestion and probe/gallery protocol splits."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .silhouette import (META_FILE, SeedLike, SilhouetteError, SilhouetteSequence,
                         read_frame_dir, read_packed)

Key = tuple[str, str]  # (subject_id, sequence_id)


class SilhouetteDataset:
    """Labelled sequences, loaded lazily and cached on first access."""

    def __init__(self, loaders: dict[Key, Callable[[], SilhouetteSequence]], name: str = ""):
        self._loaders = dict(sorted(loaders.items()))
        self._cache: dict[Key, SilhouetteSequence] = {}
        self.name = name

    @classmethod
    def from_sequences(cls, seqs: Iterable[SilhouetteSequence], name: str = "") -> "SilhouetteDataset":
        seqs = list(seqs)
        ds = cls({(s.subject_id, s.sequence_id): (lambda s=s: s) for s in seqs}, name)
        ds._cache.update({(s.subject_id, s.sequence_id): s for s in seqs})
        return ds

    def keys(self) -> list[Key]:
        return list(self._loaders)

    def __len__(self) -> int:
        return len(self._loaders)

    def __contains__(self, key) -> bool:
        return tuple(key) in self._loaders

    def __getitem__(self, key: Key) -> SilhouetteSequence:
        key = tuple(key)
        if key not in self._cache:
            self._cache[key] = self._loaders[key]()
        return self._cache[key]

    def subjects(self) -> dict[str, list[str]]:
        out = defaultdict(list)
        for sid, qid in self._loaders:
            out[sid].append(qid)
        return dict(out)

    def subset(self, keys: Iterable[Key]) -> "SilhouetteDataset":
        keys = [tuple(k) for k in keys]
        sub = SilhouetteDataset({k: self._loaders[k] for k in keys}, self.name)
        sub._cache.update({k: self._cache[k] for k in keys if k in self._cache})
        return sub

    def load_all(self) -> "SilhouetteDataset":
        for k in self._loaders:
            self[k]
        return self


def ingest_external(path: Path, format: str = "frame_dirs") -> SilhouetteDataset:
    """Open a silhouette dataset on disk.

    ``frame_dirs``: every directory holding a metadata file is one sequence.
    ``packed``: every ``*.sil`` file under ``path`` is one sequence.
    Sequences are validated when first read.
    """
    path = Path(path)
    if not path.exists():
        raise SilhouetteError(f"{path}: no such dataset")
    loaders = {}
    if format == "frame_dirs":
        for meta in sorted(path.rglob(META_FILE)):
            d = meta.parent
            try:
                info = json.loads(meta.read_text())
            except json.JSONDecodeError as exc:
                raise SilhouetteError(f"{meta}: malformed metadata") from exc
            if "subject_id" not in info:
                raise SilhouetteError(f"{meta}: metadata lacks subject_id")
            key = (str(info["subject_id"]), str(info.get("sequence_id", d.name)))
            loaders[key] = lambda d=d: read_frame_dir(d)
        orphan = [d for d in path.rglob("*") if d.is_dir() and any(d.glob("*.png"))
                  and not (d / META_FILE).exists()]
        if orphan:
            raise SilhouetteError(f"{orphan[0]}: frame directory without {META_FILE}")
    elif format == "packed":
        for f in sorted(path.rglob("*.sil")):
            seq = read_packed(f)
            loaders[(seq.subject_id, seq.sequence_id)] = lambda seq=seq: seq
    else:
        raise ValueError(f"unknown dataset format {format!r}")
    if not loaders:
        raise SilhouetteError(f"{path}: no sequences found")
    return SilhouetteDataset(loaders, name=path.name)


@dataclass
class ProtocolSplit:
    gallery: list[Key]
    probes: list[Key]
    name: str = "split"
    train: list[Key] = field(default_factory=list)

    def __post_init__(self):
        self.gallery = [tuple(k) for k in self.gallery]
        self.probes = [tuple(k) for k in self.probes]
        self.train = [tuple(k) for k in self.train]
        if set(self.gallery) & set(self.probes):
            raise ValueError("gallery and probe sets overlap")

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "gallery": [list(k) for k in self.gallery],
                           "probes": [list(k) for k in self.probes],
                           "train": [list(k) for k in self.train]}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ProtocolSplit":
        d = json.loads(text)
        return cls(d["gallery"], d["probes"], d.get("name", "split"), d.get("train", []))

    def save(self, path: Path) -> Path:
        Path(path).write_text(self.to_json())
        return Path(path)

    @classmethod
    def load(cls, path: Path) -> "ProtocolSplit":
        return cls.from_json(Path(path).read_text())


def build_split(dataset: SilhouetteDataset | Iterable[Key], protocol: str = "grew_local",
                rng_seed: SeedLike = 0, holdout_fraction: float = 0.5) -> ProtocolSplit:
    """Probe/gallery assignment.

    ``grew_local``: every subject contributes one gallery and one probe
    sequence; its remaining sequences become training data (closed set).
    ``holdout``: a fraction of subjects is held out and evaluated the
    grew_local way; the other subjects are used for training (open set) and
    leftover sequences of held-out subjects are unused.
    """
    keys = dataset.keys() if isinstance(dataset, SilhouetteDataset) else [tuple(k) for k in dataset]
    by_subject = defaultdict(list)
    for sid, qid in sorted(keys):
        by_subject[sid].append(qid)
    rng = np.random.default_rng(rng_seed)
    subjects = sorted(by_subject)
    if protocol == "grew_local":
        test_subjects = subjects
    elif protocol == "holdout":
        if not 0 < holdout_fraction < 1:
            raise ValueError("holdout fraction must lie in (0, 1)")
        n_test = max(1, int(round(holdout_fraction * len(subjects))))
        test_subjects = sorted(rng.choice(subjects, size=n_test, replace=False).tolist())
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    gallery, probes, train = [], [], []
    test_set = set(test_subjects)
    for sid in subjects:
        seqs = by_subject[sid]
        if sid not in test_set:
            train.extend((sid, q) for q in seqs)
            continue
        if len(seqs) < 2:
            raise ValueError(f"subject {sid!r} has {len(seqs)} sequence(s); grew_local needs >= 2")
        g, p = rng.choice(len(seqs), size=2, replace=False)
        gallery.append((sid, seqs[g]))
        probes.append((sid, seqs[p]))
        if protocol == "grew_local":
            # closed set: leftover sequences of evaluated subjects are training data
            train.extend((sid, q) for i, q in enumerate(seqs) if i not in (g, p))
    return ProtocolSplit(gallery, probes, protocol, train)
