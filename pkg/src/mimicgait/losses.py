"""Metric-learning and distillation losses."""

from __future__ import annotations

import warnings

import torch

FAMILIES = (1, 2, 3)


def pairwise_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Euclidean distances (rows of a) x (rows of b).

    Computed from explicit differences (no Gram trick) and with a sqrt whose
    gradient is defined as 0 at distance 0.
    """
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    pos = d2 > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, d2, torch.ones_like(d2))), torch.zeros_like(d2))


def _hinge_mean(d_ap, d_an, pos, neg, margin):
    # d_ap: A x P distances with validity pos; d_an: A x N with validity neg
    valid = pos[:, :, None] & neg[:, None, :]
    if not valid.any():
        return d_ap.sum() * 0.0
    h = torch.relu(d_ap[:, :, None] - d_an[:, None, :] + margin)
    return h[valid].mean()


def triplet_loss(embeddings: torch.Tensor, labels: torch.Tensor, margin: float = 0.2) -> torch.Tensor:
    """Batch-all triplet loss: mean of [D_ap - D_an + m]_+ over every valid triplet.

    Identities with a single sample contribute no anchor-positive pairs.
    """
    labels = torch.as_tensor(labels)
    d = pairwise_distance(embeddings, embeddings)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=embeddings.device)
    return _hinge_mean(d, d, same & ~eye, ~same, margin)


def mickd_loss(mimic: torch.Tensor, teacher: torch.Tensor, labels: torch.Tensor,
               margin: float = 0.05, families=FAMILIES) -> torch.Tensor:
    """Multi-instance correlational distillation loss.

    ``mimic[i]`` and ``teacher[i]`` embed the occluded and holistic versions of
    the same clip. Every mimic embedding is an anchor. Positives come from
    three families: the teacher embedding of the same clip (1), teacher
    embeddings of other clips of the identity (2) and mimic embeddings of other
    clips of the identity (3). Negatives are mimic and teacher embeddings of
    every other identity. Teacher embeddings are treated as constants.
    """
    labels = torch.as_tensor(labels)
    families = set(families)
    if not families <= set(FAMILIES) or not families:
        raise ValueError(f"families must be a non-empty subset of {FAMILIES}")
    n = len(labels)
    counts = torch.unique(labels, return_counts=True)[1]
    if (2 in families or 3 in families) and int(counts.min()) < 2:
        warnings.warn("some identities have K < 2 instances; cross-instance families are empty for them",
                      stacklevel=2)
    teacher = teacher.detach()
    bank = torch.cat([teacher, mimic], dim=0)            # columns: teacher then mimic
    d = pairwise_distance(mimic, bank)                   # n x 2n
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(n, dtype=torch.bool, device=mimic.device)
    none = torch.zeros_like(same)
    fam1 = eye if 1 in families else none
    fam2 = same & ~eye if 2 in families else none
    fam3 = same & ~eye if 3 in families else none
    pos = torch.cat([fam1 | fam2, fam3], dim=1)
    neg = torch.cat([~same, ~same], dim=1)
    return _hinge_mean(d, d, pos, neg, margin)


def l2kd_loss(mimic: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Mean squared Euclidean distance between paired mimic and teacher embeddings."""
    return ((mimic - teacher.detach()) ** 2).sum(-1).mean()
