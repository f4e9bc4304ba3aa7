import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from mimicgait import occlusion as occ
from mimicgait.silhouette import SilhouetteSequence


def ones_seq(t=12):
    return SilhouetteSequence(np.ones((t, 64, 64), np.uint8), subject_id="a", sequence_id="b")


def rand_seq(t=12, seed=0):
    f = (np.random.default_rng(seed).random((t, 64, 64)) > 0.5).astype(np.uint8)
    return SilhouetteSequence(f, subject_id="a", sequence_id="b")


def test_sample_spec_single_kind():
    for seed in range(50):
        s = occ.sample_spec({"top"}, seed)
        assert s.kind == "top" and 0.4 <= s.amount <= 0.6
    assert occ.sample_spec({"none"}, 3) == occ.OcclusionSpec("none", 0.0, seed=3)
    with pytest.raises(occ.OcclusionError):
        occ.sample_spec(set(), 0)


def test_sample_spec_statistics():
    specs = [occ.sample_spec({"top", "bottom"}, s) for s in range(10_000)]
    frac_top = np.mean([s.kind == "top" for s in specs])
    assert abs(frac_top - 0.5) <= 0.02
    amounts = np.array([s.amount for s in specs])
    assert stats.kstest((amounts - 0.4) / 0.2, "uniform").pvalue > 0.01


def test_dynamic_ranges():
    for seed in range(300):
        s = occ.sample_spec({"dynamic_small", "dynamic_tall"}, seed)
        lo, hi = occ.TALL_WIDTH_RANGE if s.kind == "dynamic_tall" else occ.AMOUNT_RANGE
        assert lo <= s.amount <= hi
        assert 0.5 <= s.speed <= 1.0
        assert 0 <= s.start_offset < 64
        if s.kind == "dynamic_small":
            assert 0 <= s.vertical_offset <= 64 - math.floor(s.amount * 64)


def test_middle_band_exact():
    out = occ.apply_consistent(ones_seq(1), occ.OcclusionSpec("middle", 0.5))
    f = out.frames[0]
    assert not f[16:48].any() and f[:16].all() and f[48:].all()
    assert (f == 0).sum() == 2048


def test_top_crop_of_constant_frame_is_constant():
    out = occ.apply_consistent(ones_seq(2), occ.OcclusionSpec("top", 0.5))
    assert out.frames.all()


def test_top_and_bottom_crop_against_manual_resize():
    import cv2
    seq = rand_seq(2, 4)
    spec = occ.OcclusionSpec("bottom", 0.45)
    n = math.floor(0.45 * 64)
    kept = seq.frames[0, :64 - n] * 255
    ref = (cv2.resize(kept, (64, 64), interpolation=cv2.INTER_LINEAR) >= 128).astype(np.uint8)
    assert np.array_equal(occ.apply_consistent(seq, spec).frames[0], ref)


def test_amount_zero_is_identity():
    s = rand_seq()
    assert occ.apply_consistent(s, occ.OcclusionSpec("none", 0.0)) == s
    assert occ.apply(s, occ.OcclusionSpec())[0] is s


def test_wrong_kind_rejected():
    with pytest.raises(occ.OcclusionError):
        occ.apply_consistent(ones_seq(), occ.sample_spec({"dynamic_tall"}, 0))
    with pytest.raises(occ.OcclusionError):
        occ.apply_dynamic(ones_seq(), occ.OcclusionSpec("top", 0.5))


def test_dynamic_tall_position_example():
    spec = occ.OcclusionSpec("dynamic_tall", 0.25, occ.LEFT_TO_RIGHT, 1.0, 0)
    out = occ.apply_dynamic(ones_seq(12), spec)
    f = out.frames[10]
    zero_cols = np.flatnonzero(~f.any(axis=0))
    assert zero_cols.tolist() == list(range(10, 26))


def test_half_speed_positions():
    spec = occ.OcclusionSpec("dynamic_tall", 0.25, occ.LEFT_TO_RIGHT, 0.5, 0)
    lefts = [occ.patch_geometry(spec, t, (64, 64))[0] for t in range(4)]
    assert lefts == [0, 0, 1, 1]


def test_dynamic_on_empty_input():
    z = SilhouetteSequence(np.zeros((5, 64, 64), np.uint8))
    spec = occ.sample_spec({"dynamic_small"}, 1)
    assert not occ.apply_dynamic(z, spec).frames.any()


def _oracle_patch_mask(spec, t):
    """Per-pixel oracle: which pixels the moving patch covers at frame t."""
    w = h = 64
    pw = math.floor(spec.amount * w)
    if spec.kind == "dynamic_small":
        ph, top = math.floor(spec.amount * h), spec.vertical_offset
    else:
        ph, top = h, 0
    # exact displacement: accumulate the speed t times in rationals
    from fractions import Fraction
    disp = math.floor(sum([Fraction(spec.speed)] * t, Fraction(0)))
    sign = 1 if spec.direction == occ.LEFT_TO_RIGHT else -1
    left = spec.start_offset + sign * disp
    m = np.zeros((h, w), bool)
    for y in range(top, top + ph):
        for k in range(pw):
            m[y, (left + k) % w] = True
    return m


@given(st.integers(0, 2**31 - 1), st.sampled_from(["dynamic_small", "dynamic_tall"]))
@settings(max_examples=40, deadline=None)
def test_dynamic_matches_pixel_oracle(seed, kind):
    spec = occ.sample_spec({kind}, seed)
    out = occ.apply_dynamic(ones_seq(20), spec)
    for t in (0, 1, 7, 19):
        assert np.array_equal(out.frames[t] == 0, _oracle_patch_mask(spec, t))


@given(st.integers(0, 2**31 - 1), st.sampled_from(["middle", "dynamic_small", "dynamic_tall"]))
@settings(max_examples=40, deadline=None)
def test_zeroing_kinds_never_create_pixels(seed, kind):
    s = rand_seq(6, seed % 1000)
    out, _ = occ.apply(s, occ.sample_spec({kind}, seed))
    assert not (out.frames & (1 - s.frames)).any()


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_replay_from_json_is_bit_identical(seed):
    spec = occ.sample_spec(occ.ALL_KINDS, seed)
    back = occ.OcclusionSpec.from_json(spec.to_json())
    assert back == spec
    s = rand_seq(8, seed % 97)
    assert occ.apply(s, spec)[0] == occ.apply(s, back)[0]


def test_labels():
    s = rand_seq()
    _, lab = occ.apply(s, occ.OcclusionSpec())
    assert (lab.kind, lab.class_index, lab.amount_target) == ("none", 0, 0.0)
    _, lab = occ.apply(s, occ.OcclusionSpec("top", 0.55), ("none", "top", "bottom"))
    assert (lab.kind, lab.class_index, lab.amount_target) == ("top", 1, 0.55)


def test_spec_invariants():
    with pytest.raises(occ.OcclusionError):
        occ.OcclusionSpec("none", 0.3)
    with pytest.raises(occ.OcclusionError):
        occ.OcclusionSpec("dynamic_tall", 0.3)
    with pytest.raises(occ.OcclusionError):
        occ.OcclusionSpec("sideways", 0.3)


def test_flip_mid_video():
    s = rand_seq(4, 9)
    a, b = occ.OcclusionSpec("top", 0.5), occ.OcclusionSpec("bottom", 0.5)
    out = occ.flip_mid_video(s, a, b)
    assert np.array_equal(out.frames[:2], occ.apply(s, a)[0].frames[:2])
    assert np.array_equal(out.frames[2:], occ.apply(s, b)[0].frames[2:])
    assert occ.flip_mid_video(s, a, a) == occ.apply(s, a)[0]
    odd = rand_seq(5, 1)
    assert np.array_equal(occ.flip_mid_video(odd, a, b).frames[:3], occ.apply(odd, a)[0].frames[:3])
    with pytest.raises(occ.OcclusionError):
        occ.flip_mid_video(s, occ.sample_spec({"dynamic_tall"}, 0), b)
    assert occ.flipped_kind(a).kind == "bottom"


def test_manifest_roundtrip(tmp_path):
    recs = [{"sequence_id": "x", "spec": occ.sample_spec(occ.ALL_KINDS, i).to_record()} for i in range(5)]
    p = occ.write_manifest(recs, tmp_path / "m.json")
    assert occ.read_manifest(p) == recs
