"""Visibility estimation network: occlusion-type classifier plus amount regressor.

After training the network is wrapped in :class:`FrozenVen`, which exposes only
gradient-free feature extraction.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import occlusion as occ
from .backbone import masked_temporal_mean, stack_clips
from .silhouette import BINARY_THRESHOLD, ClipPolicy, SilhouetteSequence, sample_clip

log = logging.getLogger(__name__)

DELTA_DIM = 64
INPUT_MODES = ("temporal_average", "per_frame")


@dataclass
class VenConfig:
    class_set: tuple[str, ...] = ("none", "top", "bottom")
    lambda_ce: float = 1.0
    lambda_r: float = 10.0
    lr: float = 1e-4
    iterations: int = 800
    batch_size: int = 32
    clip_frames: int = 16
    input_mode: str = "temporal_average"
    amount_range: tuple[float, float] | None = None
    seed: int = 0

    def __post_init__(self):
        self.class_set = tuple(self.class_set)
        if "none" not in self.class_set:
            raise ValueError("class_set must contain 'none'")
        if len(set(self.class_set)) != len(self.class_set):
            raise ValueError("class_set has duplicates")
        for k in self.class_set:
            if k not in occ.ALL_KINDS:
                raise ValueError(f"unknown occlusion kind {k!r}")
        if self.lambda_ce < 0 or self.lambda_r < 0 or self.lambda_ce + self.lambda_r == 0:
            raise ValueError("loss weights must be non-negative and not both zero")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")


@dataclass(frozen=True)
class VisibilityFeature:
    delta: np.ndarray
    class_logits: np.ndarray
    amount_estimate: float


class VEN(nn.Module):
    """Three conv stages (32, 64, 128), global average pool, FC to 64, two heads."""

    def __init__(self, n_classes: int = 3):
        super().__init__()
        self.n_classes = n_classes
        self.conv1 = nn.Conv2d(1, 32, 3, padding=1)
        self.conv2 = nn.Conv2d(32, 64, 3, padding=1)
        self.conv3 = nn.Conv2d(64, 128, 3, padding=1)
        self.fc1 = nn.Linear(128, DELTA_DIM)
        self.cls_head = nn.Linear(DELTA_DIM, n_classes)
        self.reg_head = nn.Linear(DELTA_DIM, 1)

    def stages(self, img: torch.Tensor) -> list[torch.Tensor]:
        """Activations after every stage, for shape tracing."""
        if img.shape[-2:] != (64, 64):
            raise ValueError(f"VEN expects 64 x 64 input, got {tuple(img.shape[-2:])}")
        out = []
        z = img
        for conv in (self.conv1, self.conv2, self.conv3):
            z = conv(z)
            out.append(z)
            z = F.max_pool2d(F.relu(z), 2)
            out.append(z)
        z = F.adaptive_avg_pool2d(z, 1).flatten(1)
        out.append(z)
        out.append(self.fc1(z))
        return out

    def delta(self, img: torch.Tensor) -> torch.Tensor:
        return self.stages(img)[-1]

    def forward(self, img: torch.Tensor):
        d = self.delta(img)
        h = F.relu(d)
        return d, self.cls_head(h), self.reg_head(h).squeeze(-1)

    def inference_parameters(self) -> int:
        """Parameters kept at inference (the heads are dropped)."""
        skip = {id(p) for m in (self.cls_head, self.reg_head) for p in m.parameters()}
        return sum(p.numel() for p in self.parameters() if id(p) not in skip)


def ven_input(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Collapse a clip batch (N x T x H x W) to one binary map per clip."""
    avg = masked_temporal_mean(x, mask)
    return (avg * 255.0 >= BINARY_THRESHOLD).to(x.dtype)[:, None]


def _run(net: VEN, x: torch.Tensor, mask: torch.Tensor, mode: str):
    if mode == "temporal_average":
        return net(ven_input(x, mask))
    n, t = mask.shape
    d, logits, amount = net(x.reshape(n * t, 1, *x.shape[2:]))
    m = mask.reshape(n, t)
    return (masked_temporal_mean(d.view(n, t, -1), m),
            masked_temporal_mean(logits.view(n, t, -1), m),
            masked_temporal_mean(amount.view(n, t, 1), m).squeeze(-1))


def occluded_batch(seqs: Sequence[SilhouetteSequence], class_set: Sequence[str], rng: np.random.Generator,
                   clip: ClipPolicy, amount_range=None):
    """Clip, occlude and label a batch; returns (x, mask, class_idx, amount)."""
    clips, cls, amt = [], [], []
    for s in seqs:
        c = sample_clip(s, clip, rng)
        spec = occ.sample_spec(class_set, rng, amount_range=amount_range)
        o, label = occ.apply(c, spec, class_set)
        clips.append(o)
        cls.append(label.class_index)
        amt.append(label.amount_target)
    x, mask = stack_clips(clips)
    return x, mask, torch.tensor(cls), torch.tensor(amt, dtype=torch.float32)


class FrozenVen:
    """Read-only VEN. Parameters are private and never receive gradients."""

    def __init__(self, net: VEN, config: VenConfig, history: dict | None = None):
        net = _clone(net)
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self._net = net
        self.config = config
        self.history = history or {}

    @property
    def class_set(self) -> tuple[str, ...]:
        return self.config.class_set

    def inference_parameters(self) -> int:
        return self._net.inference_parameters()

    def delta_from_tensors(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return _run(self._net, x.float(), mask, self.config.input_mode)[0].to(x.dtype)

    def heads_from_tensors(self, x, mask):
        with torch.no_grad():
            return _run(self._net, x.float(), mask, self.config.input_mode)

    def guide_features(self, seq: SilhouetteSequence) -> np.ndarray:
        x, mask = stack_clips([seq])
        return self.delta_from_tensors(x, mask)[0].numpy().copy()

    def forward(self, seq: SilhouetteSequence) -> VisibilityFeature:
        x, mask = stack_clips([seq])
        d, logits, amount = self.heads_from_tensors(x, mask)
        return VisibilityFeature(d[0].numpy().copy(), logits[0].numpy().copy(), float(amount[0]))

    def stage_shapes(self, seq: SilhouetteSequence) -> list[tuple[int, ...]]:
        x, mask = stack_clips([seq])
        with torch.no_grad():
            return [tuple(a.shape[1:]) for a in self._net.stages(ven_input(x, mask))]

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self._net.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def state_dict(self) -> dict:
        return {k: v.clone() for k, v in self._net.state_dict().items()}

    def unfrozen_copy(self) -> VEN:
        net = _clone(self._net)
        for p in net.parameters():
            p.requires_grad_(True)
        return net.train()

    @classmethod
    def from_state(cls, state: dict, config: VenConfig, history=None) -> "FrozenVen":
        net = VEN(len(config.class_set))
        net.load_state_dict(state)
        return cls(net, config, history)


def _clone(net: VEN) -> VEN:
    out = VEN(net.n_classes)
    out.load_state_dict(net.state_dict())
    return out


def train_ven(sequences: Sequence[SilhouetteSequence], config: VenConfig,
              init: VEN | None = None) -> FrozenVen:
    """Minimise lambda_ce * CE(kind) + lambda_r * MSE(amount) on freshly occluded clips."""
    if len(sequences) == 0:
        raise ValueError("no training sequences")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    net = VEN(len(config.class_set)) if init is None else init
    if net.n_classes != len(config.class_set):
        raise ValueError("initial VEN does not match class_set size")
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    clip = ClipPolicy.fixed(config.clip_frames)
    hist = {"loss": [], "ce": [], "reg": []}
    t0 = time.time()
    for it in range(config.iterations):
        idx = rng.integers(0, len(sequences), size=config.batch_size)
        x, mask, cls, amt = occluded_batch([sequences[i] for i in idx], config.class_set, rng,
                                           clip, config.amount_range)
        _, logits, pred = _run(net, x, mask, config.input_mode)
        ce = F.cross_entropy(logits, cls)
        reg = F.mse_loss(pred, amt)
        loss = config.lambda_ce * ce + config.lambda_r * reg
        opt.zero_grad()
        loss.backward()
        opt.step()
        hist["loss"].append(float(loss.detach()))
        hist["ce"].append(float(ce.detach()))
        hist["reg"].append(float(reg.detach()))
        if it % 100 == 0:
            log.info("ven it %d loss %.4f ce %.4f reg %.5f (%.0fs)", it, loss, ce, reg, time.time() - t0)
    return FrozenVen(net, config, hist)


def expand_ven(ven: FrozenVen, new_class_set: Sequence[str]) -> VEN:
    """Trainable copy of ``ven`` whose classifier covers ``new_class_set``.

    Rows of the old classes are copied; new rows start at zero.
    """
    old = list(ven.class_set)
    new = list(new_class_set)
    missing = [k for k in old if k not in new]
    if missing:
        raise ValueError(f"new class set drops kinds {missing}")
    src = ven.unfrozen_copy()
    net = VEN(len(new))
    state = src.state_dict()
    w = torch.zeros(len(new), DELTA_DIM)
    b = torch.zeros(len(new))
    for i, k in enumerate(old):
        w[new.index(k)] = state["cls_head.weight"][i]
        b[new.index(k)] = state["cls_head.bias"][i]
    state["cls_head.weight"], state["cls_head.bias"] = w, b
    net.load_state_dict(state)
    return net.train()


def evaluate_ven(ven: FrozenVen, sequences: Sequence[SilhouetteSequence], n_samples: int = 400,
                 seed: int = 1, clip_frames: int | None = None, batch_size: int = 64) -> dict:
    """Held-out accuracy, amount MSE and the raw predictions."""
    rng = np.random.default_rng(seed)
    clip = ClipPolicy.fixed(clip_frames or ven.config.clip_frames)
    preds, cls_all, amt_all, est_all = [], [], [], []
    for start in range(0, n_samples, batch_size):
        b = min(batch_size, n_samples - start)
        idx = rng.integers(0, len(sequences), size=b)
        x, mask, cls, amt = occluded_batch([sequences[i] for i in idx], ven.class_set, rng, clip,
                                           ven.config.amount_range)
        _, logits, est = ven.heads_from_tensors(x, mask)
        preds.append(logits.argmax(-1))
        cls_all.append(cls)
        amt_all.append(amt)
        est_all.append(est)
    pred = torch.cat(preds).numpy()
    cls = torch.cat(cls_all).numpy()
    amt = torch.cat(amt_all).numpy()
    est = torch.cat(est_all).numpy()
    return {"accuracy": float((pred == cls).mean()), "mse": float(((est - amt) ** 2).mean()),
            "amount_target": amt, "amount_estimate": est, "class_true": cls, "class_pred": pred}


def config_dict(config: VenConfig) -> dict:
    d = asdict(config)
    d["class_set"] = list(config.class_set)
    return d
