"""Multi-seed toy experiment suite with an on-disk model cache.

Models are keyed by (stage, seed, config hash) and stored as checkpoints, so
the acceptance tests, the scripts and the CLI share one set of trained models.
Training wall-clock per model is kept next to each checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import torch

from . import checkpoint as ckpt
from . import pipeline
from .config import RunConfig, toy_preset
from .evaluation import HOLISTIC, EvalReport, ScenarioConfig, fill_rp, run_protocol
from .ven import evaluate_ven

log = logging.getLogger(__name__)

DEFAULT_CACHE = Path(os.environ.get("MIMICGAIT_CACHE", Path.home() / ".cache" / "mimicgait"))
ORDERING_MODELS = ("baseline1", "baseline2", "occ_aware", "mimic")
ABLATION = {"no_kd": {"loss": "none"}, "l2kd": {"loss": "l2kd"}, "mickd": {},
            "mickd_xe": {"xe": True}}
RANGES = ((0.4, 0.6), (0.3, 0.5), (0.2, 0.4), (0.1, 0.3))


def config_hash(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    d.pop("seed")
    for sec in ("teacher", "baseline", "ven", "distill"):
        d[sec].pop("seed")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:10]


@dataclass
class SeedRun:
    """Lazily trained models of one seed."""

    cfg: RunConfig
    cache: Path
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dir = Path(self.cache) / f"{config_hash(self.cfg)}" / f"seed{self.cfg.seed}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self._mem: dict = {}
        self._nested = 0.0
        self.dataset, self.split = pipeline.toy_data(self.cfg)
        self.train = pipeline.training_sequences(self.dataset, self.split)
        tfile = self.dir / "timings.json"
        if tfile.is_file():
            self.timings = json.loads(tfile.read_text())

    def _cached(self, name: str, build: Callable, save: Callable):
        if name in self._mem:
            return self._mem[name]
        path = self.dir / f"{name}.pt"
        if path.is_file():
            obj, _ = ckpt.load(path)
        else:
            torch.set_num_threads(1)
            t0, outer = time.time(), self._nested
            self._nested = 0.0
            obj = build()
            elapsed = time.time() - t0
            # stages built lazily inside this one record their own time
            self.timings[name] = elapsed - self._nested
            self._nested = outer + elapsed
            save(path, obj)
            (self.dir / "timings.json").write_text(json.dumps(self.timings, indent=1))
            log.info("seed %d: trained %s in %.0fs", self.cfg.seed, name, self.timings[name])
        self._mem[name] = obj
        return obj

    def _enc(self, name, build, role):
        return self._cached(name, build, lambda p, m: ckpt.save_encoder(
            p, m, self.cfg.to_dict(), self.cfg.seed, role=role))

    def _mim(self, name, build):
        return self._cached(name, build, lambda p, m: ckpt.save_mimic(
            p, m, self.cfg.to_dict(), self.cfg.seed, role=name))

    @property
    def teacher(self):
        return self._enc("teacher", lambda: pipeline.fit_teacher(self.cfg, self.train), "teacher")

    @property
    def ven(self):
        return self._cached("ven", lambda: pipeline.fit_ven(self.cfg, self.train),
                            lambda p, v: ckpt.save_ven(p, v, self.cfg.ven.seed))

    @property
    def baseline2(self):
        return self._enc("baseline2", lambda: pipeline.fit_baseline(self.cfg, self.train, self.cfg.distill.kinds),
                         "baseline2")

    @property
    def occ_aware(self):
        return self._mim("occ_aware", lambda: pipeline.fit_baseline(self.cfg, self.train, self.cfg.distill.kinds,
                                                                    self.ven))

    def variant(self, name: str, **overrides):
        """Distilled mimic variant (``mickd`` is the default recipe)."""
        return self._mim(name, lambda: pipeline.fit_mimic(self.cfg, self.teacher, self.ven, self.train,
                                                          **overrides))

    @property
    def mimic(self):
        return self.variant("mickd")

    @property
    def adapted(self):
        def build():
            model, _ = pipeline.fit_adapt(self.cfg, self.mimic, self.teacher, self.ven, self.train)
            return model
        return self._mim("adapted", build)

    def model(self, name: str):
        if name == "baseline1":
            return self.teacher
        if name == "mimic":
            return self.mimic
        if name in ABLATION:
            return self.variant(name, **ABLATION[name])
        return getattr(self, name)

    def ven_quality(self, n_samples: int = 400) -> dict:
        held = [self.dataset[k] for k in self.split.gallery + self.split.probes]
        r = evaluate_ven(self.ven, held, n_samples=n_samples, seed=self.cfg.seed + 1000)
        return {"accuracy": r["accuracy"], "mse": r["mse"],
                "inference_parameters": self.ven.inference_parameters()}

    def evaluate(self, name: str, scenario: ScenarioConfig, eval_seed: int | None = None) -> EvalReport:
        model = self.model(name)
        seed = self.cfg.seed if eval_seed is None else eval_seed
        hp = run_protocol(model, self.dataset, self.split, HOLISTIC, seed, model_id=name)
        fill_rp(hp, hp)
        if scenario.holistic:
            return hp
        return run_protocol(model, self.dataset, self.split, scenario, seed, holistic=hp, model_id=name)


@dataclass
class Suite:
    seeds: Sequence[int] = (0, 1, 2)
    repeats: int = 3
    cache: Path = DEFAULT_CACHE
    base: RunConfig = field(default_factory=toy_preset)

    def __post_init__(self):
        self._runs = {}

    def run(self, seed: int) -> SeedRun:
        if seed not in self._runs:
            self._runs[seed] = SeedRun(self.base.with_seed(seed), Path(self.cache))
        return self._runs[seed]

    def scenario(self, kinds=("top", "bottom"), amount_range=None, **kw) -> ScenarioConfig:
        return ScenarioConfig(tuple(kinds), amount_range_override=amount_range, repeats=self.repeats, **kw)

    def rank1_table(self, models: Sequence[str], scenario: ScenarioConfig) -> dict:
        """{model: [Rank-1 per seed]} plus the reports themselves."""
        out, reports = {}, {}
        for m in models:
            out[m] = []
            for s in self.seeds:
                rep = self.run(s).evaluate(m, scenario)
                reports[(m, s)] = rep
                out[m].append(rep.rank_k[1])
        return {"rank1": out, "median": {m: statistics.median(v) for m, v in out.items()}, "reports": reports}

    def ordering(self) -> dict:
        return self.rank1_table(ORDERING_MODELS, self.scenario())

    def ablation(self) -> dict:
        return self.rank1_table(tuple(ABLATION), self.scenario())

    def zero_shot_middle(self) -> dict:
        return self.rank1_table(("baseline2", "mimic", "adapted"), self.scenario(("middle",)))

    def range_sweep(self, model: str = "mimic") -> dict:
        res = {}
        for lo, hi in RANGES:
            t = self.rank1_table((model,), self.scenario(amount_range=(lo, hi)))
            res[f"{round(lo * 100)}-{round(hi * 100)}"] = {"rank1": t["rank1"][model], "median": t["median"][model]}
        return res

    def timings(self) -> dict:
        return {s: dict(self.run(s).timings) for s in self.seeds}


def summarise(table: dict) -> dict:
    """JSON-friendly view of a rank1_table result."""
    return {k: v for k, v in table.items() if k != "reports"}


def is_non_decreasing(values: Sequence[float], tol: float = 0.0) -> bool:
    return all(b >= a - tol for a, b in zip(values, values[1:]))


def with_overrides(base: RunConfig, **sections) -> RunConfig:
    """Patch config sections, e.g. ``with_overrides(cfg, distill={"iterations": 10})``."""
    out = base
    for sec, kw in sections.items():
        out = replace(out, **{sec: replace(getattr(out, sec), **kw)})
    return out
