"""Mimic network (visibility-feature injection) and the distillation stage."""

from __future__ import annotations

import copy
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import occlusion as occ
from .backbone import BNNeckClassifier, GaitEncoder, stack_clips
from .losses import FAMILIES, l2kd_loss, mickd_loss, triplet_loss
from .silhouette import ClipPolicy, SilhouetteSequence, sample_clip
from .training import TrainConfig, group_by_subject, lr_at, make_optimizer, param_hash, sample_pk, train_encoder
from .ven import DELTA_DIM, FrozenVen

log = logging.getLogger(__name__)

LOSSES = ("mickd", "l2kd", "none")


class MimicNetwork(nn.Module):
    """gamma_m = T(backbone(O) ++ delta(O)) with a frozen VEN supplying delta.

    ``T`` starts as identity on the backbone block and zero on the delta block,
    so a fresh mimic network computes exactly its backbone's embedding. Without
    a VEN the network is the vanilla variant: ``T`` acts on the backbone block only.
    """

    def __init__(self, backbone: GaitEncoder, ven: FrozenVen | None = None):
        super().__init__()
        self.backbone = backbone
        self.embedding_dim = backbone.embedding_dim
        self._ven = ven
        d = backbone.embedding_dim
        self.injection = nn.Linear(d + (DELTA_DIM if ven is not None else 0), d, bias=False)
        with torch.no_grad():
            self.injection.weight.zero_()
            self.injection.weight[:, :d] = torch.eye(d)

    @property
    def ven(self) -> FrozenVen | None:
        return self._ven

    @property
    def uses_ven(self) -> bool:
        return self._ven is not None

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        g = self.backbone(x, mask)
        if self._ven is not None:
            g = torch.cat([g, self._ven.delta_from_tensors(x, mask).to(g.dtype)], dim=-1)
        if g.shape[-1] != self.injection.in_features:
            raise ValueError(f"injection expects {self.injection.in_features} features, got {g.shape[-1]}")
        return self.injection(g)

    def with_ven(self, ven: FrozenVen | None) -> "MimicNetwork":
        """Copy with another (e.g. extended) VEN, keeping all trainable weights."""
        out = MimicNetwork(copy.deepcopy(self.backbone), ven)
        if (ven is None) != (self._ven is None):
            raise ValueError("cannot switch between vanilla and VEN-guided injection")
        out.injection.load_state_dict(self.injection.state_dict())
        return out


def mimic_encode(net: MimicNetwork, seq: SilhouetteSequence):
    from .backbone import GaitSignature
    net.eval()
    x, mask = stack_clips([seq])
    with torch.no_grad():
        v = net(x, mask)[0].numpy().copy()
    return GaitSignature(v, "mimic", seq.sequence_id, seq.subject_id)


class FrozenEncoder:
    """Read-only copy of a trained encoder, used as the teacher."""

    def __init__(self, model: nn.Module):
        m = copy.deepcopy(model)
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)
        self._model = m
        self.embedding_dim = model.embedding_dim

    def __call__(self, x, mask):
        with torch.no_grad():
            return self._model(x, mask)

    def state_hash(self) -> str:
        return param_hash(self._model)

    def trainable_copy(self) -> nn.Module:
        m = copy.deepcopy(self._model)
        for p in m.parameters():
            p.requires_grad_(True)
        return m.train()


@dataclass
class DistillConfig:
    loss: str = "mickd"
    families: tuple[int, ...] = FAMILIES
    margin: float = 0.05
    xe: bool = False
    xe_weight: float = 1.0
    use_ven: bool = True
    warm_start: bool = True
    kinds: tuple[str, ...] = ("top", "bottom")
    amount_range: tuple[float, float] | None = None
    optimizer: str = "sgd"
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    iterations: int = 400
    batch_identities: int = 32
    seqs_per_identity: int = 4
    clip_lo: int = 30
    clip_hi: int = 30
    lr_milestones: tuple[float, ...] = (0.6, 0.85)
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        self.kinds = tuple(self.kinds)
        self.families = tuple(self.families)
        self.lr_milestones = tuple(self.lr_milestones)
        for k in self.kinds:
            if k not in occ.ALL_KINDS:
                raise ValueError(f"unknown occlusion kind {k!r}")
        if self.batch_identities < 2:
            raise ValueError("need P >= 2")
        if self.seqs_per_identity < 2:
            warnings.warn("K < 2: cross-instance distillation families are empty", stacklevel=2)

    def train_config(self) -> TrainConfig:
        """Equivalent supervised config (used by the no-KD variant)."""
        return TrainConfig(optimizer=self.optimizer, learning_rate=self.learning_rate,
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           iterations=self.iterations, batch_identities=self.batch_identities,
                           seqs_per_identity=max(2, self.seqs_per_identity), clip_lo=self.clip_lo,
                           clip_hi=self.clip_hi, lr_milestones=self.lr_milestones, seed=self.seed)

    @property
    def clip_policy(self) -> ClipPolicy:
        if self.clip_lo == self.clip_hi:
            return ClipPolicy.fixed(self.clip_lo)
        return ClipPolicy.uniform(self.clip_lo, self.clip_hi)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("families", "kinds", "lr_milestones"):
            d[k] = list(d[k])
        if d["amount_range"] is not None:
            d["amount_range"] = list(d["amount_range"])
        return d


@dataclass
class DistillResult:
    model: MimicNetwork
    history: dict = field(default_factory=dict)


def _check_ven(ven: FrozenVen | None, kinds: Sequence[str], use_ven: bool):
    if not use_ven:
        return
    if ven is None:
        raise ValueError("a frozen VEN is required unless use_ven is off")
    missing = [k for k in kinds if k not in ven.class_set]
    if missing:
        raise ValueError(f"VEN class set {list(ven.class_set)} does not cover kinds {missing}")


def init_mimic(teacher: FrozenEncoder | nn.Module, ven: FrozenVen | None, config: DistillConfig,
               fresh_backbone: GaitEncoder | None = None) -> MimicNetwork:
    """F_m with the teacher's architecture: a weight copy (warm start) or a fresh backbone."""
    if config.warm_start:
        bb = teacher.trainable_copy() if isinstance(teacher, FrozenEncoder) else copy.deepcopy(teacher)
    else:
        if fresh_backbone is None:
            raise ValueError("cold start needs a freshly initialised backbone")
        bb = fresh_backbone
    return MimicNetwork(bb, ven if config.use_ven else None)


def distill(teacher: FrozenEncoder, ven: FrozenVen | None, sequences: Sequence[SilhouetteSequence],
            config: DistillConfig, mimic: MimicNetwork | None = None,
            fresh_backbone: GaitEncoder | None = None) -> DistillResult:
    """Train F_m on occluded clips against the frozen teacher on their holistic originals.

    Each batch item is a holistic clip C and its occluded copy O (fresh spec per
    item). The loss is MiCKD, L2-KD, or plain triplet + CE without the teacher
    (``loss='none'``); ``xe`` adds BN-neck cross-entropy on gamma_m.
    """
    if not isinstance(teacher, FrozenEncoder):
        raise TypeError("teacher must be a FrozenEncoder")
    _check_ven(ven, config.kinds, config.use_ven)
    if mimic is None:
        mimic = init_mimic(teacher, ven, config, fresh_backbone)
    if config.loss == "none":
        res = train_encoder(mimic, sequences, config.train_config(), kinds=config.kinds,
                            amount_range=config.amount_range)
        return DistillResult(mimic, res.history)

    teacher_hash = teacher.state_hash()
    ven_hash = ven.state_hash() if ven is not None else None
    groups = group_by_subject(sequences)
    label_index = {sid: i for i, sid in enumerate(groups)}
    init_state = copy.deepcopy(mimic.state_dict())
    lr = config.learning_rate
    restarts = 0
    while True:
        hist = _distill_loop(teacher, mimic, groups, label_index, config, lr)
        if hist is not None:
            break
        restarts += 1
        if restarts > 3:
            raise RuntimeError("distillation diverged after repeated learning-rate reductions")
        log.warning("distillation loss explosion at lr %g; restarting at lr %g", lr, lr * 0.1)
        mimic.load_state_dict(init_state)
        lr *= 0.1
    hist["lr_restarts"] = restarts
    hist["final_lr"] = lr
    if teacher.state_hash() != teacher_hash:
        raise RuntimeError("teacher parameters changed during distillation")
    if ven is not None and ven.state_hash() != ven_hash:
        raise RuntimeError("VEN parameters changed during distillation")
    hist["teacher_hash"] = teacher_hash
    hist["ven_hash"] = ven_hash
    mimic.eval()
    return DistillResult(mimic, hist)


def _distill_loop(teacher, mimic, groups, label_index, config: DistillConfig, lr: float) -> dict | None:
    """One distillation run; ``None`` if the loss explodes."""
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    head = BNNeckClassifier(mimic.embedding_dim, len(groups)) if config.xe else None
    params = [p for p in mimic.parameters() if p.requires_grad]
    if head is not None:
        params += list(head.parameters())
    tcfg = config.train_config()
    opt = make_optimizer(params, tcfg, lr)
    hist = {"loss": [], "kd": [], "xe": []}
    mimic.train()
    t0 = time.time()
    first = None
    for it in range(config.iterations):
        for g in opt.param_groups:
            g["lr"] = lr_at(tcfg, lr, it)
        seqs, names = sample_pk(groups, config.batch_identities, config.seqs_per_identity, rng)
        holistic = [sample_clip(s, config.clip_policy, rng) for s in seqs]
        occluded = [occ.apply(c, occ.sample_spec(config.kinds, rng, amount_range=config.amount_range))[0]
                    for c in holistic]
        xc, mc = stack_clips(holistic)
        xo, mo = stack_clips(occluded)
        labels = torch.tensor([label_index[n] for n in names])
        gt = teacher(xc, mc)
        gm = mimic(xo, mo)
        if config.loss == "mickd":
            kd = mickd_loss(gm, gt, labels, config.margin, config.families)
        else:
            kd = l2kd_loss(gm, gt)
        loss = kd
        xe = torch.zeros(())
        if head is not None:
            xe = F.cross_entropy(head(gm), labels)
            loss = loss + config.xe_weight * xe
        value = float(loss.detach())
        first = value if first is None else first
        # warm-started mimics can start near zero loss, so the reference is floored at 1
        if not math.isfinite(value) or value > tcfg.explosion_factor * max(first, 1.0):
            return None
        opt.zero_grad()
        loss.backward()
        opt.step()
        hist["loss"].append(value)
        hist["kd"].append(float(kd.detach()))
        hist["xe"].append(float(xe.detach()))
        if it % 50 == 0:
            log.info("distill it %d loss %.4f (%.0fs)", it, value, time.time() - t0)
    return hist


def adaptation_iterations(original: int, budget_fraction: float = 0.11) -> int:
    """Extra iterations granted for adaptation (default 11% of the original run)."""
    return int(round(original * budget_fraction))


def adapt(mimic: MimicNetwork, teacher: FrozenEncoder, ven: FrozenVen | None,
          sequences: Sequence[SilhouetteSequence], config: DistillConfig, new_kinds: Sequence[str],
          extra_iterations: int | None = None, budget_fraction: float = 0.11) -> DistillResult:
    """Continue distillation on the union of original and new kinds.

    ``ven`` must already cover the enlarged kind set (see ``ven.expand_ven``).
    The returned model is a copy; ``mimic`` is not modified.
    """
    kinds = tuple(dict.fromkeys(tuple(config.kinds) + tuple(new_kinds)))
    if config.use_ven:
        if ven is None:
            raise ValueError("adaptation of a VEN-guided mimic needs the extended VEN")
        missing = [k for k in kinds if k not in ven.class_set]
        if missing:
            raise ValueError(f"VEN class set does not cover new kinds {missing}")
    n = adaptation_iterations(config.iterations, budget_fraction) if extra_iterations is None else extra_iterations
    model = mimic.with_ven(ven if config.use_ven else None)
    if n == 0:
        model.eval()
        return DistillResult(model, {"loss": [], "iterations": 0})
    cfg = replace(config, kinds=kinds, iterations=n, lr_milestones=(), seed=config.seed + 1,
                  learning_rate=config.learning_rate * (0.1 ** len(config.lr_milestones)))
    res = distill(teacher, ven if config.use_ven else None, sequences, cfg, mimic=model)
    res.history["iterations"] = n
    return res
