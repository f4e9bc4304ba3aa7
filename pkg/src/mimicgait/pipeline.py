"""Stage functions shared by the CLI and the experiment scripts.

Each stage takes a resolved :class:`RunConfig` and returns trained objects;
every backbone is initialised under ``torch.manual_seed`` of its stage seed so
a (config, seed) pair reproduces bit-exactly on one worker.
"""

from __future__ import annotations

import logging
from dataclasses import replace
from typing import Sequence

import torch

from . import occlusion as occ
from .backbone import GaitEncoder, build_backbone
from .config import RunConfig
from .datasets import ProtocolSplit, SilhouetteDataset, build_split
from .distill import DistillConfig, FrozenEncoder, MimicNetwork, adapt, distill
from .silhouette import SilhouetteSequence
from .toy import generate_sequences
from .training import pretrain_teacher, train_encoder
from .ven import FrozenVen, expand_ven, train_ven

log = logging.getLogger(__name__)


def new_backbone(cfg: RunConfig, seed: int) -> GaitEncoder:
    torch.manual_seed(seed)
    return build_backbone(cfg.backbone.architecture, **cfg.backbone.kwargs())


def toy_data(cfg: RunConfig) -> tuple[SilhouetteDataset, ProtocolSplit]:
    d = cfg.data
    seqs, _ = generate_sequences(d.identities, d.seqs_per_id, d.frames, cfg.seed)
    ds = SilhouetteDataset.from_sequences(seqs, name="toy")
    return ds, build_split(ds, d.protocol, d.split_seed + cfg.seed, d.holdout_fraction)


def training_sequences(ds: SilhouetteDataset, split: ProtocolSplit | None) -> list[SilhouetteSequence]:
    keys = split.train if split is not None and split.train else ds.keys()
    return [ds[k] for k in keys]


def fit_teacher(cfg: RunConfig, train: Sequence[SilhouetteSequence]) -> GaitEncoder:
    return pretrain_teacher(new_backbone(cfg, cfg.teacher.seed), train, cfg.teacher).model


def fit_ven(cfg: RunConfig, train: Sequence[SilhouetteSequence]) -> FrozenVen:
    return train_ven(train, cfg.ven)


def fit_baseline(cfg: RunConfig, train: Sequence[SilhouetteSequence], kinds: Sequence[str],
                 ven: FrozenVen | None = None):
    """Occluded supervised training; with a VEN this is the occlusion-aware variant."""
    bb = new_backbone(cfg, cfg.baseline.seed)
    model = MimicNetwork(bb, ven) if ven is not None else bb
    return train_encoder(model, train, cfg.baseline, kinds=tuple(kinds),
                         amount_range=cfg.distill.amount_range).model


def fit_mimic(cfg: RunConfig, teacher, ven: FrozenVen | None, train: Sequence[SilhouetteSequence],
              **overrides) -> MimicNetwork:
    """Distil a mimic from ``teacher``; ``overrides`` patch the distill section."""
    dcfg: DistillConfig = replace(cfg.distill, **overrides)
    frozen = teacher if isinstance(teacher, FrozenEncoder) else FrozenEncoder(teacher)
    fresh = None if dcfg.warm_start else new_backbone(cfg, dcfg.seed)
    return distill(frozen, ven if dcfg.use_ven else None, train, dcfg, fresh_backbone=fresh).model


def extend_ven(cfg: RunConfig, ven: FrozenVen, new_kinds: Sequence[str],
               train: Sequence[SilhouetteSequence]) -> FrozenVen:
    classes = tuple(dict.fromkeys(tuple(ven.class_set) + tuple(new_kinds)))
    vcfg = replace(ven.config, class_set=classes, iterations=cfg.adapt.ven_iterations,
                   seed=ven.config.seed + 1)
    return train_ven(train, vcfg, init=expand_ven(ven, classes))


def fit_adapt(cfg: RunConfig, mimic: MimicNetwork, teacher, ven: FrozenVen | None,
              train: Sequence[SilhouetteSequence], new_kinds: Sequence[str] | None = None,
              extra_iterations: int | None = None) -> tuple[MimicNetwork, FrozenVen | None]:
    """Extend the VEN to the new kinds, then continue distillation on the union."""
    new_kinds = tuple(new_kinds or cfg.adapt.new_kinds)
    unknown = [k for k in new_kinds if k not in occ.ALL_KINDS]
    if unknown:
        raise ValueError(f"unknown occlusion kinds {unknown}")
    dcfg = cfg.distill
    new_ven = None
    if mimic.uses_ven:
        base = ven if ven is not None else mimic.ven
        new_ven = extend_ven(cfg, base, new_kinds, train)
    dcfg = replace(dcfg, use_ven=mimic.uses_ven)
    frozen = teacher if isinstance(teacher, FrozenEncoder) else FrozenEncoder(teacher)
    res = adapt(mimic, frozen, new_ven, train, dcfg, new_kinds, extra_iterations=extra_iterations,
                budget_fraction=cfg.adapt.budget_fraction)
    return res.model, new_ven
