"""Retrieval/verification metrics, RP, and occluded evaluation protocols."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import occlusion as occ
from .backbone import stack_clips
from .datasets import ProtocolSplit, SilhouetteDataset
from .silhouette import SilhouetteSequence

RANKS = (1, 5, 20)
FARS = (0.01,)


# --- metrics ---------------------------------------------------------------

def euclidean(probe: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    p = np.asarray(probe, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    return np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(-1))


def rank_retrieval(probe_sigs: np.ndarray, probe_labels: Sequence, gallery_sigs: np.ndarray,
                   gallery_labels: Sequence, ks: Sequence[int] = RANKS):
    """Rank-K accuracies and per-probe records.

    Gallery entries are grouped per subject (minimum distance); subjects are
    ordered by distance with ties broken by first appearance in the gallery.
    """
    if len(gallery_labels) == 0:
        raise ValueError("empty gallery")
    d = euclidean(probe_sigs, gallery_sigs)
    subjects = list(dict.fromkeys(gallery_labels))
    col = {s: i for i, s in enumerate(subjects)}
    per_subject = np.full((d.shape[0], len(subjects)), np.inf)
    for j, lab in enumerate(gallery_labels):
        c = col[lab]
        per_subject[:, c] = np.minimum(per_subject[:, c], d[:, j])
    order = np.argsort(per_subject, axis=1, kind="stable")
    records, hits = [], np.zeros((len(probe_labels), len(ks)), dtype=bool)
    for i, lab in enumerate(probe_labels):
        ranked = [subjects[c] for c in order[i]]
        rank = ranked.index(lab) + 1 if lab in col else None
        for j, k in enumerate(ks):
            hits[i, j] = rank is not None and rank <= k
        records.append({"probe": i, "label": lab, "rank": rank, "top1": ranked[0],
                        "top1_distance": float(per_subject[i, order[i, 0]])})
    acc = {int(k): float(hits[:, j].mean()) if len(probe_labels) else 0.0 for j, k in enumerate(ks)}
    return acc, records


def tar_at_far_scores(genuine: np.ndarray, impostor: np.ndarray, far: float = 0.01) -> float:
    """TAR at the distance threshold that accepts a ``far`` fraction of impostors.

    The threshold is the k-th smallest impostor distance with k = floor(far * n);
    a pair is accepted when its distance is strictly below it.
    """
    impostor = np.sort(np.asarray(impostor, dtype=np.float64))
    if impostor.size == 0:
        raise ValueError("no impostor pairs")
    genuine = np.asarray(genuine, dtype=np.float64)
    if genuine.size == 0:
        return float("nan")
    k = int(math.floor(far * impostor.size))
    thr = impostor[k] if k < impostor.size else np.inf
    return float((genuine < thr).mean())


def verification_tar(probe_sigs, probe_labels, gallery_sigs, gallery_labels, far: float = 0.01) -> float:
    """TAR@FAR over all cross-set probe/gallery pairs."""
    d = euclidean(probe_sigs, gallery_sigs)
    same = np.asarray(probe_labels, dtype=object)[:, None] == np.asarray(gallery_labels, dtype=object)[None, :]
    return tar_at_far_scores(d[same], d[~same], far)


def relative_performance(op_value: float, hp_value: float) -> float | None:
    """RP = OP / HP; None (with a warning) when HP is zero."""
    if hp_value == 0:
        warnings.warn("holistic performance is 0; RP undefined", stacklevel=2)
        return None
    if hp_value < 0:
        raise ValueError("holistic performance must be positive")
    return op_value / hp_value


# --- protocol --------------------------------------------------------------

@dataclass
class ScenarioConfig:
    eval_kinds: tuple[str, ...] = ("top", "bottom")
    restrict_to: str | None = None
    flip_mid_video: bool = False
    amount_range_override: tuple[float, float] | None = None
    repeats: int = 1
    name: str = ""

    def __post_init__(self):
        self.eval_kinds = tuple(self.eval_kinds)
        if not self.eval_kinds:
            raise ValueError("eval_kinds is empty")
        for k in self.eval_kinds:
            if k not in occ.ALL_KINDS:
                raise ValueError(f"unknown occlusion kind {k!r}")
        if self.restrict_to is not None and self.restrict_to not in self.eval_kinds:
            raise ValueError("restrict_to must be one of eval_kinds")
        if self.amount_range_override is not None:
            lo, hi = self.amount_range_override
            if not 0 < lo <= hi < 1:
                raise ValueError("amount_range_override must lie inside (0, 1)")
            self.amount_range_override = (float(lo), float(hi))
        if self.flip_mid_video and any(k in occ.DYNAMIC_KINDS for k in self.active_kinds):
            raise ValueError("flip_mid_video supports consistent kinds only")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if not self.name:
            self.name = self.default_name()

    @property
    def active_kinds(self) -> tuple[str, ...]:
        return (self.restrict_to,) if self.restrict_to else self.eval_kinds

    def default_name(self) -> str:
        s = "+".join(self.active_kinds)
        if self.flip_mid_video:
            s += "/flip"
        if self.amount_range_override:
            lo, hi = self.amount_range_override
            s += f"@{round(lo * 100)}-{round(hi * 100)}"
        return s

    @property
    def holistic(self) -> bool:
        return self.active_kinds == (occ.NONE,)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval_kinds"] = list(self.eval_kinds)
        if self.amount_range_override:
            d["amount_range_override"] = list(self.amount_range_override)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scenario keys {sorted(unknown)}")
        return cls(**d)


HOLISTIC = ScenarioConfig(eval_kinds=("none",), name="holistic")


@dataclass
class EvalReport:
    rank_k: dict
    tar_at_far: dict
    rp: dict = field(default_factory=dict)
    protocol_name: str = ""
    occlusion_config: dict = field(default_factory=dict)
    model_ids: list = field(default_factory=list)
    seed: int = 0
    records: list = field(default_factory=list)
    std: dict = field(default_factory=dict)
    runs: list = field(default_factory=list)
    manifest: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rank_k"] = {str(k): v for k, v in self.rank_k.items()}
        d["tar_at_far"] = {str(k): v for k, v in self.tar_at_far.items()}
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["rank_k"] = {int(k): v for k, v in d["rank_k"].items()}
        d["tar_at_far"] = {float(k): v for k, v in d["tar_at_far"].items()}
        return cls(**d)

    def check_invariants(self) -> list[str]:
        """Violations of the report invariants (empty when consistent)."""
        bad = []
        ks = sorted(self.rank_k)
        for k in ks:
            if not 0.0 <= self.rank_k[k] <= 1.0:
                bad.append(f"rank-{k} accuracy {self.rank_k[k]} outside [0, 1]")
        for a, b in zip(ks, ks[1:]):
            if self.rank_k[a] > self.rank_k[b] + 1e-12:
                bad.append(f"rank-{a} {self.rank_k[a]} > rank-{b} {self.rank_k[b]}")
        for v in self.tar_at_far.values():
            if not (0.0 <= v <= 1.0 or math.isnan(v)):
                bad.append(f"TAR {v} outside [0, 1]")
        for name, v in self.rp.items():
            if v is not None and v < 0:
                bad.append(f"RP {name} negative")
        return bad


def embed(model: Callable, seqs: Sequence[SilhouetteSequence], batch_size: int = 64) -> np.ndarray:
    """Eval-mode, gradient-free embeddings of whole sequences."""
    if hasattr(model, "eval"):
        model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(seqs), batch_size):
            x, mask = stack_clips(seqs[i:i + batch_size])
            out.append(model(x, mask).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, 0))


def _occlude_set(seqs, scenario: ScenarioConfig, seed_seq: np.random.SeedSequence):
    rngs = [np.random.default_rng(s) for s in seed_seq.spawn(len(seqs))]
    out, manifest = [], []
    for s, rng in zip(seqs, rngs):
        spec = occ.sample_spec(scenario.active_kinds, rng, amount_range=scenario.amount_range_override)
        if scenario.flip_mid_video and spec.kind != occ.NONE:
            spec_b = occ.flipped_kind(spec)
            o = occ.flip_mid_video(s, spec, spec_b)
            manifest.append({"subject_id": s.subject_id, "sequence_id": s.sequence_id,
                             "spec": spec.to_record(), "spec_b": spec_b.to_record()})
        else:
            o, _ = occ.apply(s, spec)
            manifest.append({"subject_id": s.subject_id, "sequence_id": s.sequence_id,
                             "spec": spec.to_record()})
        out.append(o)
    return out, manifest


def _metrics(model, probes, gallery):
    p = embed(model, probes)
    g = embed(model, gallery)
    pl = [s.subject_id for s in probes]
    gl = [s.subject_id for s in gallery]
    rank, records = rank_retrieval(p, pl, g, gl)
    tar = {far: verification_tar(p, pl, g, gl, far) for far in FARS}
    return rank, tar, records


def run_protocol(model: Callable, dataset: SilhouetteDataset, split: ProtocolSplit,
                 scenario: ScenarioConfig, seed: int = 0, holistic: EvalReport | None = None,
                 model_id: str = "model", allowed_kinds: Sequence[str] = occ.ALL_KINDS) -> EvalReport:
    """Occlude every probe and gallery sequence independently and score retrieval.

    Repeat r uses the r-th child of ``SeedSequence(seed)``; with several repeats
    the report carries the mean and the per-metric standard deviation. If a
    holistic report is given, RP is filled for every metric.
    """
    unknown = [k for k in scenario.active_kinds if k not in allowed_kinds]
    if unknown:
        raise ValueError(f"scenario uses kinds unknown to the engine: {unknown}")
    probes = [dataset[k] for k in split.probes]
    gallery = [dataset[k] for k in split.gallery]
    runs, manifest, records = [], [], []
    for r, child in enumerate(np.random.SeedSequence(seed).spawn(scenario.repeats)):
        ps, gs = child.spawn(2)
        op, m1 = _occlude_set(probes, scenario, ps)
        og, m2 = _occlude_set(gallery, scenario, gs)
        rank, tar, rec = _metrics(model, op, og)
        runs.append({"rank_k": rank, "tar_at_far": tar})
        manifest.append({"repeat": r, "probes": m1, "gallery": m2})
        if r == 0:
            records = rec
    rank_k = {k: float(np.mean([x["rank_k"][k] for x in runs])) for k in runs[0]["rank_k"]}
    tar_at = {f: float(np.mean([x["tar_at_far"][f] for x in runs])) for f in runs[0]["tar_at_far"]}
    std = {f"rank{k}": float(np.std([x["rank_k"][k] for x in runs])) for k in rank_k}
    std.update({f"tar@{f}": float(np.std([x["tar_at_far"][f] for x in runs])) for f in tar_at})
    report = EvalReport(rank_k=rank_k, tar_at_far=tar_at, protocol_name=scenario.name,
                        occlusion_config=scenario.to_dict(), model_ids=[model_id], seed=seed,
                        records=records, std=std,
                        runs=[{"rank_k": {str(k): v for k, v in x["rank_k"].items()},
                               "tar_at_far": {str(k): v for k, v in x["tar_at_far"].items()}} for x in runs],
                        manifest=manifest)
    if holistic is not None:
        fill_rp(report, holistic)
    return report


def fill_rp(report: EvalReport, holistic: EvalReport) -> EvalReport:
    rp = {}
    for k, v in report.rank_k.items():
        rp[f"rank{k}"] = relative_performance(v, holistic.rank_k[k])
    for f, v in report.tar_at_far.items():
        rp[f"tar@{f}"] = relative_performance(v, holistic.tar_at_far[f])
    report.rp = rp
    return report


@dataclass
class Comparison:
    reports: dict  # (model, scenario) -> EvalReport

    def rows(self) -> list[dict]:
        out = []
        for (model, scen), rep in self.reports.items():
            row = {"model": model, "scenario": scen}
            row.update({f"rank{k}": v for k, v in rep.rank_k.items()})
            row.update({f"tar@{f}": v for f, v in rep.tar_at_far.items()})
            row.update({f"rp_{k}": v for k, v in rep.rp.items()})
            out.append(row)
        return out

    def to_csv(self) -> str:
        rows = self.rows()
        keys = list(dict.fromkeys(k for r in rows for k in r))
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()

    def to_json(self, **kw) -> str:
        return json.dumps([{"model": m, "scenario": s, "report": r.to_dict()}
                           for (m, s), r in self.reports.items()], **kw)

    def rank1(self, model: str, scenario: str) -> float:
        return self.reports[(model, scenario)].rank_k[1]


def compare_methods(models: Mapping[str, Callable], dataset: SilhouetteDataset, split: ProtocolSplit,
                    scenarios: Sequence[ScenarioConfig], seed: int = 0) -> Comparison:
    """One report per (model, scenario); RP against each model's own holistic run."""
    reports = {}
    for name, model in models.items():
        hp = run_protocol(model, dataset, split, HOLISTIC, seed, model_id=name)
        fill_rp(hp, hp)
        reports[(name, HOLISTIC.name)] = hp
        for sc in scenarios:
            if sc.holistic:
                continue
            reports[(name, sc.name)] = run_protocol(model, dataset, split, sc, seed, holistic=hp, model_id=name)
    return Comparison(reports)
