"""Self-describing checkpoints for encoders, mimic networks and VENs."""

from __future__ import annotations

import subprocess
from pathlib import Path

import torch

from .backbone import ARCHITECTURES, GaitEncoder, build_backbone
from .ven import FrozenVen, VenConfig, config_dict

FORMAT = "mimicgait-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def version_string() -> str:
    """Package version plus ``git describe`` output when available."""
    from . import __version__
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        desc = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{__version__}+{desc}" if desc else __version__


def _encoder_blob(model: GaitEncoder) -> dict:
    return {"architecture": model.architecture, "arch_config": model.arch_config(),
            "embedding_dim": model.embedding_dim, "state_dict": model.state_dict()}


def _ven_blob(ven: FrozenVen) -> dict:
    return {"config": config_dict(ven.config), "class_set": list(ven.class_set),
            "state_dict": ven.state_dict()}


def _write(path: Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": FORMAT, "format_version": FORMAT_VERSION, "version": version_string(), **payload},
               path)
    return path


def save_encoder(path: Path, model: GaitEncoder, config: dict | None = None, seed: int | None = None,
                 role: str = "teacher", **extra) -> Path:
    return _write(path, {"kind": "encoder", "role": role, **_encoder_blob(model),
                         "config": config or {}, "seed": seed, **extra})


def save_ven(path: Path, ven: FrozenVen, seed: int | None = None, **extra) -> Path:
    return _write(path, {"kind": "ven", **_ven_blob(ven), "seed": seed if seed is not None else ven.config.seed,
                         "lambda_ce": ven.config.lambda_ce, "lambda_r": ven.config.lambda_r, **extra})


def save_mimic(path: Path, mimic, config: dict | None = None, seed: int | None = None,
               role: str = "mimic", **extra) -> Path:
    payload = {"kind": "mimic", "role": role, "backbone": _encoder_blob(mimic.backbone),
               "injection": mimic.injection.state_dict(), "embedding_dim": mimic.embedding_dim,
               "uses_ven": mimic.uses_ven, "ven": _ven_blob(mimic.ven) if mimic.uses_ven else None,
               "config": config or {}, "seed": seed, **extra}
    return _write(path, payload)


def _load_encoder(blob: dict) -> GaitEncoder:
    arch = blob["architecture"]
    if arch not in ARCHITECTURES:
        raise CheckpointError(f"unknown architecture {arch!r}")
    kwargs = dict(blob["arch_config"])
    for k, v in kwargs.items():
        if isinstance(v, list):
            kwargs[k] = tuple(v)
    model = build_backbone(arch, **kwargs)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


def _load_ven(blob: dict) -> FrozenVen:
    cfg = dict(blob["config"])
    if cfg.get("amount_range") is not None:
        cfg["amount_range"] = tuple(cfg["amount_range"])
    return FrozenVen.from_state(blob["state_dict"], VenConfig(**cfg))


def read_raw(path: Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        doc = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises several unrelated types on corrupt files
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    return doc


def load(path: Path, expect: str | None = None):
    """Return ``(object, metadata)``: a GaitEncoder, MimicNetwork or FrozenVen."""
    from .distill import MimicNetwork
    doc = read_raw(path)
    kind = doc["kind"]
    if expect is not None and kind != expect:
        raise CheckpointError(f"{path}: expected a {expect} checkpoint, found {kind}")
    if kind == "encoder":
        obj = _load_encoder(doc)
    elif kind == "ven":
        obj = _load_ven(doc)
    elif kind == "mimic":
        ven = _load_ven(doc["ven"]) if doc["uses_ven"] else None
        obj = MimicNetwork(_load_encoder(doc["backbone"]), ven)
        obj.injection.load_state_dict(doc["injection"])
        obj.eval()
    else:
        raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")
    meta = {k: v for k, v in doc.items() if k not in ("state_dict", "backbone", "injection", "ven")}
    return obj, meta
