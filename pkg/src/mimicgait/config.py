"""Run configuration: one YAML document covering every stage.

Component dataclasses default to the full-scale recipe; :func:`toy_preset`
holds the desk-scale values used by the CLI and the toy experiments.
Precedence is flag > config file > preset.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .distill import DistillConfig
from .evaluation import ScenarioConfig
from .training import TrainConfig
from .ven import VenConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    identities: int = 50
    seqs_per_id: int = 4
    frames: int = 60
    protocol: str = "grew_local"
    holdout_fraction: float = 0.5
    split_seed: int = 0


@dataclass
class BackboneConfig:
    architecture: str = "reference"
    embedding_dim: int = 128
    channels: tuple[int, int, int] = (8, 16, 32)
    n_parts: int = 4

    def kwargs(self) -> dict:
        if self.architecture == "reference":
            return {"embedding_dim": self.embedding_dim, "channels": tuple(self.channels),
                    "n_parts": self.n_parts}
        return {"embedding_dim": self.embedding_dim}


@dataclass
class AdaptConfig:
    new_kinds: tuple[str, ...] = ("middle",)
    budget_fraction: float = 0.11
    ven_iterations: int = 300


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    teacher: TrainConfig = field(default_factory=TrainConfig)
    baseline: TrainConfig = field(default_factory=TrainConfig)
    ven: VenConfig = field(default_factory=VenConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path: Path) -> Path:
        Path(path).write_text(self.to_yaml())
        return Path(path)

    def with_seed(self, seed: int) -> "RunConfig":
        """Same configuration with every stage seeded from ``seed``."""
        d = self.to_dict()
        d["seed"] = seed
        for sec, off in (("teacher", 0), ("baseline", 100), ("ven", 200), ("distill", 300)):
            d[sec]["seed"] = seed + off
        return from_dict(d)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return _build(tp, value, where)
    if origin is typing.Union or str(origin) == "types.UnionType":
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        elem = args[0] if args else object
        return tuple(_coerce(elem, v, where) for v in value)
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp in (int, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")
    return value


def _build(cls, data: dict, where: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    """Merge ``data`` over ``base`` (default: the toy preset), rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    merged = _merge((base or toy_preset()).to_dict(), data)
    return _build(RunConfig, merged, "")


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load(path: Path | None, overrides: list[str] | None = None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: malformed YAML ({exc})") from exc
    cfg = from_dict(data)
    return apply_overrides(cfg, overrides or [])


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings (values parsed as YAML scalars/lists)."""
    d = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(d, base=RunConfig())


def toy_preset() -> RunConfig:
    """Desk-scale settings for the 50-identity toy benchmark on one CPU core.

    Every stage runs the same number of iterations. SGD at 0.1 overshoots on
    the toy backbone, so supervised stages use 0.01; distillation uses 0.05
    because most MiCKD triplets are inactive and the gradients are small.
    """
    clip = dict(clip_lo=16, clip_hi=16, batch_identities=8, seqs_per_identity=4, iterations=600)
    return RunConfig(
        teacher=TrainConfig(learning_rate=0.01, **clip),
        baseline=TrainConfig(learning_rate=0.01, **clip),
        ven=VenConfig(lr=1e-3, iterations=600),
        distill=DistillConfig(learning_rate=0.05, **clip),
    )


def full_scale_preset() -> RunConfig:
    """Full-scale recipe (component defaults)."""
    return RunConfig()
