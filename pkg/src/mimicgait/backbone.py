"""Gait encoders.

Any ``GaitEncoder`` maps a padded clip batch ``x`` (N x T x H x W, float) and a
validity mask (N x T, bool) to embeddings (N x D). Encoders expose the input
of their last fully connected stage through ``trunk``/``head`` so that the
mimic network can inject visibility features there.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .silhouette import SilhouetteSequence


@dataclass(frozen=True)
class GaitSignature:
    vector: np.ndarray
    source: str  # "teacher" or "mimic"
    sequence_id: str = ""
    subject_id: str = ""

    def __post_init__(self):
        if self.source not in ("teacher", "mimic"):
            raise ValueError(f"unknown signature source {self.source!r}")
        if not np.isfinite(self.vector).all():
            raise ValueError("signature has non-finite entries")


def stack_clips(seqs: Sequence[SilhouetteSequence], dtype=torch.float32):
    """Pad a list of sequences with invalid frames into (x, mask) tensors."""
    t_max = max(len(s) for s in seqs)
    h, w = seqs[0].frames.shape[1:]
    x = np.zeros((len(seqs), t_max, h, w), dtype=np.float32)
    mask = np.zeros((len(seqs), t_max), dtype=bool)
    for i, s in enumerate(seqs):
        x[i, :len(s)] = s.frames
        mask[i, :len(s)] = s.valid_mask
    return torch.from_numpy(x).to(dtype), torch.from_numpy(mask)


def masked_temporal_max(feat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Max over frames of ``feat`` (N x T x ...) ignoring invalid frames.

    A clip with no valid frame pools to zeros.
    """
    m = mask.view(*mask.shape, *([1] * (feat.dim() - 2)))
    filled = feat.masked_fill(~m, float("-inf"))
    out = filled.max(dim=1).values
    return torch.where(torch.isfinite(out), out, torch.zeros_like(out))


def masked_temporal_mean(feat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask.view(*mask.shape, *([1] * (feat.dim() - 2))).to(feat.dtype)
    return (feat * m).sum(1) / m.sum(1).clamp(min=1.0)


class GaitEncoder(nn.Module):
    """Base class: ``forward = head(trunk(x, mask))``."""

    architecture = "abstract"
    embedding_dim: int
    feature_dim: int

    def trunk(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def head(self, f: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(x, mask))

    def arch_config(self) -> dict:
        return {}

    @torch.no_grad()
    def encode(self, seqs: Sequence[SilhouetteSequence], batch_size: int = 64,
               source: str = "teacher") -> list[GaitSignature]:
        """Eval-mode embeddings for whole sequences."""
        was_training = self.training
        self.eval()
        out = []
        try:
            for i in range(0, len(seqs), batch_size):
                chunk = seqs[i:i + batch_size]
                x, mask = stack_clips(chunk)
                emb = self(x, mask).numpy()
                out.extend(GaitSignature(e.copy(), source, s.sequence_id, s.subject_id)
                           for e, s in zip(emb, chunk))
        finally:
            self.train(was_training)
        return out


class ReferenceBackbone(GaitEncoder):
    """Compact spatio-temporal encoder.

    Per-frame conv stack, masked temporal max pooling, then ``n_parts``
    horizontal strips each pooled by max + mean and mapped by its own linear
    layer; the part outputs are concatenated into the embedding.
    """

    architecture = "reference"

    def __init__(self, embedding_dim: int = 128, channels: tuple[int, int, int] = (16, 32, 64),
                 n_parts: int = 4, input_downsample: int = 2):
        super().__init__()
        if embedding_dim % n_parts:
            raise ValueError("embedding_dim must be divisible by n_parts")
        c1, c2, c3 = channels
        self.embedding_dim = embedding_dim
        self.channels = tuple(channels)
        self.n_parts = n_parts
        self.input_downsample = input_downsample
        self.feature_dim = n_parts * c3
        act = lambda: nn.LeakyReLU(0.1)
        self.convs = nn.Sequential(
            nn.Conv2d(1, c1, 5, padding=2), act(), nn.MaxPool2d(2),
            nn.Conv2d(c1, c2, 3, padding=1), act(), nn.MaxPool2d(2),
            nn.Conv2d(c2, c3, 3, padding=1), act(),
            nn.Conv2d(c3, c3, 3, padding=1), act(),
        )
        # separate FC per horizontal part, stored as one batched weight
        self.part_weight = nn.Parameter(torch.empty(n_parts, c3, embedding_dim // n_parts))
        nn.init.xavier_uniform_(self.part_weight)

    def arch_config(self) -> dict:
        return {"embedding_dim": self.embedding_dim, "channels": list(self.channels),
                "n_parts": self.n_parts, "input_downsample": self.input_downsample}

    def trunk(self, x, mask):
        n, t, h, w = x.shape
        z = x.reshape(n * t, 1, h, w)
        if self.input_downsample > 1:
            z = F.avg_pool2d(z, self.input_downsample)
        z = self.convs(z)
        z = z.view(n, t, *z.shape[1:])
        z = masked_temporal_max(z, mask)                # N x C x h' x w'
        parts = z.view(n, z.shape[1], self.n_parts, -1)  # strips of rows
        pooled = parts.amax(-1) + parts.mean(-1)        # N x C x parts
        return pooled.permute(0, 2, 1).reshape(n, -1)   # N x (parts*C)

    def head(self, f):
        n = f.shape[0]
        p = f.view(n, self.n_parts, -1).permute(1, 0, 2)       # parts x N x C
        return torch.bmm(p, self.part_weight).permute(1, 0, 2).reshape(n, -1)


class PixelStatsBackbone(GaitEncoder):
    """Deliberately trivial encoder: row/column foreground profiles, mean and
    standard deviation over valid frames, one linear layer."""

    architecture = "pixel_stats"

    def __init__(self, embedding_dim: int = 64, frame_size: tuple[int, int] = (64, 64)):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.frame_size = tuple(frame_size)
        self.feature_dim = 2 * sum(frame_size)
        self.linear = nn.Linear(self.feature_dim, embedding_dim)

    def arch_config(self) -> dict:
        return {"embedding_dim": self.embedding_dim, "frame_size": list(self.frame_size)}

    def trunk(self, x, mask):
        prof = torch.cat([x.mean(-1), x.mean(-2)], dim=-1)      # N x T x (H+W)
        mu = masked_temporal_mean(prof, mask)
        var = masked_temporal_mean((prof - mu[:, None]) ** 2, mask)
        return torch.cat([mu, var.sqrt()], dim=-1)

    def head(self, f):
        return self.linear(f)


ARCHITECTURES = {cls.architecture: cls for cls in (ReferenceBackbone, PixelStatsBackbone)}


def build_backbone(architecture: str = "reference", **kwargs) -> GaitEncoder:
    try:
        cls = ARCHITECTURES[architecture]
    except KeyError:
        raise ValueError(f"unknown backbone architecture {architecture!r}") from None
    return cls(**kwargs)


def reference_backbone(config=None) -> ReferenceBackbone:
    cfg = {} if config is None else dict(config)
    return ReferenceBackbone(**cfg)


class BNNeckClassifier(nn.Module):
    """Training-only head: batch-norm neck followed by a bias-free classifier."""

    def __init__(self, dim: int, n_classes: int):
        super().__init__()
        self.bn = nn.BatchNorm1d(dim)
        self.fc = nn.Linear(dim, n_classes, bias=False)

    def forward(self, emb):
        return self.fc(self.bn(emb))
