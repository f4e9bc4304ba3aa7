import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mimicgait.losses import l2kd_loss, mickd_loss, pairwise_distance, triplet_loss


def dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def triplet_oracle(emb, labels, m):
    """Triple nested loop over (anchor, positive, negative)."""
    vals = []
    n = len(labels)
    for a in range(n):
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            for q in range(n):
                if labels[q] == labels[a]:
                    continue
                vals.append(max(0.0, dist(emb[a], emb[p]) - dist(emb[a], emb[q]) + m))
    return sum(vals) / len(vals) if vals else 0.0


def mickd_oracle(gm, gt, labels, m, families=(1, 2, 3)):
    """Enumerate every (family, anchor, positive, negative) explicitly."""
    n = len(labels)
    positives = []  # (anchor index, positive vector)
    for i in range(n):
        for j in range(n):
            if labels[j] != labels[i]:
                continue
            if j == i and 1 in families:
                positives.append((i, gt[j]))
            if j != i and 2 in families:
                positives.append((i, gt[j]))
            if j != i and 3 in families:
                positives.append((i, gm[j]))
    vals = []
    for i, pv in positives:
        for k in range(n):
            if labels[k] == labels[i]:
                continue
            for nv in (gm[k], gt[k]):
                vals.append(max(0.0, dist(gm[i], pv) - dist(gm[i], nv) + m))
    return sum(vals) / len(vals) if vals else 0.0


def random_batch(rng, P, K, D):
    labels = np.repeat(np.arange(P), K)
    perm = rng.permutation(len(labels))
    return rng.normal(size=(P * K, D)), labels[perm]


def test_triplet_trivial_cases():
    lab = torch.tensor([0, 0, 1, 1])
    assert float(triplet_loss(torch.zeros(4, 3), lab, 0.3)) == pytest.approx(0.3)
    sep = torch.tensor([[0.0, 0], [0, 0], [5, 0], [5, 0]])
    assert float(triplet_loss(sep, lab, 0.3)) == 0.0


def test_triplet_singleton_identity_skipped():
    lab = torch.tensor([0, 0, 1])
    e = torch.randn(3, 4, dtype=torch.float64)
    assert float(triplet_loss(e, lab, 0.2)) == pytest.approx(triplet_oracle(e.tolist(), lab.tolist(), 0.2))
    assert float(triplet_loss(e, torch.tensor([0, 1, 2]), 0.2)) == 0.0


def test_triplet_matches_oracle_4x4x8():
    rng = np.random.default_rng(0)
    e, lab = random_batch(rng, 4, 4, 8)
    got = float(triplet_loss(torch.tensor(e), torch.tensor(lab), 0.2))
    assert got == pytest.approx(triplet_oracle(e.tolist(), lab.tolist(), 0.2), abs=1e-6)


@given(st.integers(0, 2**32 - 1), st.integers(2, 4), st.integers(1, 3), st.integers(1, 8),
       st.floats(0.01, 1.0))
@settings(max_examples=60, deadline=None)
def test_losses_match_oracles(seed, P, K, D, m):
    rng = np.random.default_rng(seed)
    gm, lab = random_batch(rng, P, K, D)
    gt = gm + 0.3 * rng.normal(size=gm.shape)
    tl = float(triplet_loss(torch.tensor(gm), torch.tensor(lab), m))
    assert tl == pytest.approx(triplet_oracle(gm.tolist(), lab.tolist(), m), abs=1e-6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ml = float(mickd_loss(torch.tensor(gm), torch.tensor(gt), torch.tensor(lab), m))
    assert ml == pytest.approx(mickd_oracle(gm.tolist(), gt.tolist(), lab.tolist(), m), abs=1e-6)


def test_mickd_trivial_cases():
    lab = torch.tensor([0, 0, 1, 1])
    z = torch.zeros(4, 5)
    assert float(mickd_loss(z, z, lab, 0.05)) == pytest.approx(0.05)
    pts = torch.tensor([[0.0, 0], [0, 0], [1, 0], [1, 0]])
    assert float(mickd_loss(pts, pts.clone(), lab, 0.05)) == 0.0


def test_mickd_family1_only_is_plain_student_teacher_triplet():
    rng = np.random.default_rng(1)
    gm, lab = random_batch(rng, 3, 2, 6)
    gt = rng.normal(size=gm.shape)
    got = float(mickd_loss(torch.tensor(gm), torch.tensor(gt), torch.tensor(lab), 0.1, families=(1,)))
    assert got == pytest.approx(mickd_oracle(gm.tolist(), gt.tolist(), lab.tolist(), 0.1, (1,)), abs=1e-9)


def test_mickd_warns_when_k_below_two():
    lab = torch.tensor([0, 1, 2])
    with pytest.warns(UserWarning):
        mickd_loss(torch.randn(3, 4), torch.randn(3, 4), lab)


def test_mickd_rejects_bad_families():
    with pytest.raises(ValueError):
        mickd_loss(torch.randn(4, 2), torch.randn(4, 2), torch.tensor([0, 0, 1, 1]), families=(4,))


def test_mickd_permutation_invariant():
    rng = np.random.default_rng(2)
    gm, lab = random_batch(rng, 3, 3, 5)
    gt = rng.normal(size=gm.shape)
    perm = rng.permutation(len(lab))
    a = mickd_loss(torch.tensor(gm), torch.tensor(gt), torch.tensor(lab))
    b = mickd_loss(torch.tensor(gm[perm]), torch.tensor(gt[perm]), torch.tensor(lab[perm]))
    assert float(a) == pytest.approx(float(b), abs=1e-12)


def test_mickd_no_gradient_to_teacher():
    gm = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
    gt = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
    loss = mickd_loss(gm, gt, torch.tensor([0, 0, 1, 1, 2, 2]), 0.5)
    loss.backward()
    assert gt.grad is None
    assert gm.grad is not None and gm.grad.abs().sum() > 0


def _fd_check(loss_fn, x, eps=1e-4):
    x = x.clone().requires_grad_(True)
    loss_fn(x).backward()
    g = x.grad.clone()
    num = torch.zeros_like(x)
    with torch.no_grad():
        flat = x.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            up = loss_fn(x).item()
            flat[i] = old - eps
            down = loss_fn(x).item()
            flat[i] = old
            num.view(-1)[i] = (up - down) / (2 * eps)
    return float((g - num).norm() / max(num.norm(), 1e-12))


def _hinge_args(gm, gt, lab, m, mode):
    """All hinge arguments D_ap - D_an + m of the batch."""
    d_self = pairwise_distance(gm, gm)
    if mode == "triplet":
        same = lab[:, None] == lab[None, :]
        eye = torch.eye(len(lab), dtype=torch.bool)
        pos, neg = same & ~eye, ~same
        return (d_self[:, :, None] - d_self[:, None, :] + m)[pos[:, :, None] & neg[:, None, :]]
    bank = torch.cat([gt, gm])
    d = pairwise_distance(gm, bank)
    same = lab[:, None] == lab[None, :]
    eye = torch.eye(len(lab), dtype=torch.bool)
    pos = torch.cat([same, same & ~eye], 1)
    neg = torch.cat([~same, ~same], 1)
    return (d[:, :, None] - d[:, None, :] + m)[pos[:, :, None] & neg[:, None, :]]


@pytest.mark.parametrize("mode", ["triplet", "mickd"])
def test_gradients_match_finite_differences(mode):
    rng = np.random.default_rng(7)
    checked = 0
    for trial in range(40):
        gm_np, lab_np = random_batch(rng, 3, 2, 4)
        gm = torch.tensor(gm_np)
        gt = torch.tensor(gm_np + 0.5 * rng.normal(size=gm_np.shape))
        lab = torch.tensor(lab_np)
        m = 0.3
        args = _hinge_args(gm, gt, lab, m, mode)
        if args.abs().min() < 1e-2:
            continue  # too close to a hinge kink for a central difference
        if mode == "triplet":
            fn = lambda x: triplet_loss(x, lab, m)
        else:
            fn = lambda x: mickd_loss(x, gt, lab, m)
        assert _fd_check(fn, gm) < 1e-3
        checked += 1
    assert checked >= 10


def test_monotone_in_negative_distance():
    rng = np.random.default_rng(3)
    gm, lab = random_batch(rng, 3, 2, 3)
    gt = gm + 0.1 * rng.normal(size=gm.shape)
    base = float(mickd_loss(torch.tensor(gm), torch.tensor(gt), torch.tensor(lab), 0.5))
    moved = gm.copy()
    moved[lab == 2] += 10.0  # push identity 2 far from everybody
    gt2 = gt.copy()
    gt2[lab == 2] += 10.0
    # only anchors of identities 0/1 see larger negative distances; identity 2 anchors keep
    # their positives and also see farther negatives
    after = float(mickd_loss(torch.tensor(moved), torch.tensor(gt2), torch.tensor(lab), 0.5))
    assert after <= base + 1e-12


def test_pairwise_distance_safe_at_zero():
    x = torch.zeros(2, 3, dtype=torch.float64, requires_grad=True)
    pairwise_distance(x, x).sum().backward()
    assert torch.isfinite(x.grad).all()


def test_l2kd():
    a = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
    b = torch.zeros(2, 2, requires_grad=True)
    assert float(l2kd_loss(a, b)) == pytest.approx(2.5)
