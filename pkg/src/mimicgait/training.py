"""Supervised metric-learning loop (teacher pretraining and occluded baselines)."""

from __future__ import annotations

import copy
import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import occlusion as occ
from .backbone import BNNeckClassifier, stack_clips
from .losses import triplet_loss
from .silhouette import ClipPolicy, SilhouetteSequence, sample_clip

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    iterations: int = 400
    batch_identities: int = 32       # P
    seqs_per_identity: int = 4       # K
    clip_lo: int = 30
    clip_hi: int = 30
    margin: float = 0.2
    triplet_weight: float = 1.0
    ce_weight: float = 1.0
    lr_milestones: tuple[float, ...] = (0.6, 0.85)   # fractions of iterations, x0.1 each
    explosion_factor: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_identities < 2 or self.seqs_per_identity < 2:
            raise ValueError("triplet mining needs P >= 2 and K >= 2")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        self.lr_milestones = tuple(self.lr_milestones)

    @property
    def clip_policy(self) -> ClipPolicy:
        if self.clip_lo == self.clip_hi:
            return ClipPolicy.fixed(self.clip_lo)
        return ClipPolicy.uniform(self.clip_lo, self.clip_hi)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d


def group_by_subject(seqs: Sequence[SilhouetteSequence]) -> dict[str, list[SilhouetteSequence]]:
    out: dict[str, list[SilhouetteSequence]] = {}
    for s in seqs:
        out.setdefault(s.subject_id, []).append(s)
    return dict(sorted(out.items()))


def sample_pk(groups: dict[str, list], P: int, K: int, rng: np.random.Generator):
    """P identities without replacement, K sequences each (with replacement only if needed)."""
    subjects = list(groups)
    if len(subjects) < P:
        raise ValueError(f"dataset has {len(subjects)} identities, batch needs P={P}")
    chosen = rng.choice(len(subjects), size=P, replace=False)
    batch, labels = [], []
    for ci in chosen:
        pool = groups[subjects[ci]]
        idx = rng.choice(len(pool), size=K, replace=len(pool) < K)
        batch.extend(pool[i] for i in idx)
        labels.extend([subjects[ci]] * K)
    return batch, labels


def occlude_each(clips: Sequence[SilhouetteSequence], kinds: Sequence[str], rng: np.random.Generator,
                 amount_range=None) -> list[SilhouetteSequence]:
    """Apply a freshly drawn occlusion to every clip independently."""
    return [occ.apply(c, occ.sample_spec(kinds, rng, amount_range=amount_range))[0] for c in clips]


def param_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def make_optimizer(params, cfg: TrainConfig, lr: float):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(params, lr=lr, weight_decay=cfg.weight_decay)


def lr_at(cfg: TrainConfig, base: float, it: int) -> float:
    drops = sum(it >= int(math.floor(f * cfg.iterations)) for f in cfg.lr_milestones)
    return base * (0.1 ** drops)


@dataclass
class TrainResult:
    model: nn.Module
    history: dict = field(default_factory=dict)


def train_encoder(model: nn.Module, sequences: Sequence[SilhouetteSequence], config: TrainConfig,
                  kinds: Sequence[str] | None = None, amount_range=None) -> TrainResult:
    """Triplet + BN-neck cross-entropy training of ``model``.

    With ``kinds`` set every clip is occluded by an independently drawn spec
    (the occluded-baseline recipe); otherwise clips are holistic. The model is
    trained in place and returned. A loss explosion (non-finite, or above
    ``explosion_factor`` times the first loss) restarts from the initial
    weights at a tenth of the learning rate.
    """
    groups = group_by_subject(sequences)
    n_ids = len(groups)
    if n_ids < config.batch_identities:
        raise ValueError(f"dataset has {n_ids} identities, batch needs P={config.batch_identities}")
    label_index = {sid: i for i, sid in enumerate(groups)}
    init_state = copy.deepcopy(model.state_dict())
    lr = config.learning_rate
    hist = {"loss": [], "triplet": [], "ce": [], "lr_restarts": 0}
    while True:
        torch.manual_seed(config.seed)
        rng = np.random.default_rng(config.seed)
        head = BNNeckClassifier(model.embedding_dim, n_ids)
        params = [p for p in model.parameters() if p.requires_grad] + list(head.parameters())
        opt = make_optimizer(params, config, lr)
        model.train()
        head.train()
        exploded = False
        first = None
        t0 = time.time()
        for it in range(config.iterations):
            for g in opt.param_groups:
                g["lr"] = lr_at(config, lr, it)
            seqs, names = sample_pk(groups, config.batch_identities, config.seqs_per_identity, rng)
            clips = [sample_clip(s, config.clip_policy, rng) for s in seqs]
            if kinds:
                clips = occlude_each(clips, kinds, rng, amount_range)
            x, mask = stack_clips(clips)
            labels = torch.tensor([label_index[n] for n in names])
            emb = model(x, mask)
            tri = triplet_loss(emb, labels, config.margin)
            ce = F.cross_entropy(head(emb), labels)
            loss = config.triplet_weight * tri + config.ce_weight * ce
            value = float(loss.detach())
            first = value if first is None else first
            if not math.isfinite(value) or value > config.explosion_factor * max(first, 1e-8):
                exploded = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            hist["loss"].append(value)
            hist["triplet"].append(float(tri.detach()))
            hist["ce"].append(float(ce.detach()))
            if it % 50 == 0:
                log.info("it %d loss %.4f tri %.4f ce %.4f (%.0fs)", it, value, float(tri.detach()), float(ce.detach()), time.time() - t0)
        if not exploded:
            break
        log.warning("loss explosion at lr %g; restarting at lr %g", lr, lr * 0.1)
        model.load_state_dict(init_state)
        hist = {"loss": [], "triplet": [], "ce": [], "lr_restarts": hist["lr_restarts"] + 1}
        lr *= 0.1
        if hist["lr_restarts"] > 3:
            raise RuntimeError("training diverged after repeated learning-rate reductions")
    hist["final_lr"] = lr
    model.eval()
    return TrainResult(model, hist)


def pretrain_teacher(backbone: nn.Module, sequences: Sequence[SilhouetteSequence],
                     config: TrainConfig) -> TrainResult:
    """Train F_t on holistic clips."""
    return train_encoder(backbone, sequences, config, kinds=None)
