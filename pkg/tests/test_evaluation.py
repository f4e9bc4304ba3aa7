import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mimicgait.backbone import PixelStatsBackbone
from mimicgait.datasets import SilhouetteDataset, build_split
from mimicgait.evaluation import (HOLISTIC, EvalReport, ScenarioConfig, compare_methods, rank_retrieval,
                                  relative_performance, run_protocol, tar_at_far_scores, verification_tar)
from mimicgait.toy import generate_sequences


def brute_rank(p, pl, g, gl, k):
    """Per probe: sort subjects by their closest gallery entry, check the top k."""
    hits = 0
    for i in range(len(p)):
        best = {}
        for j in range(len(g)):
            d = math.dist(p[i], g[j])
            best[gl[j]] = min(best.get(gl[j], math.inf), d)
        order = sorted(best, key=lambda s: best[s])
        hits += pl[i] in order[:k]
    return hits / len(p)


@given(st.integers(0, 2**31), st.integers(2, 12), st.integers(1, 3), st.integers(1, 6))
@settings(max_examples=60, deadline=None)
def test_rank_matches_brute_force(seed, n_sub, per, dim):
    rng = np.random.default_rng(seed)
    gl = [f"s{i}" for i in range(n_sub) for _ in range(per)]
    g = rng.normal(size=(len(gl), dim))
    pl = list(rng.choice(sorted(set(gl)), size=7))
    p = rng.normal(size=(7, dim))
    acc, _ = rank_retrieval(p, pl, g, gl, ks=(1, 2, 5))
    for k in (1, 2, 5):
        assert acc[k] == pytest.approx(brute_rank(p, pl, g, gl, k))
    assert acc[1] <= acc[2] <= acc[5]


def test_rank_records():
    g = np.array([[0.0], [10.0]])
    acc, rec = rank_retrieval(np.array([[1.0]]), ["b"], g, ["a", "b"], ks=(1, 5))
    assert acc == {1: 0.0, 5: 1.0}
    assert rec[0]["rank"] == 2


def test_tar_on_gaussian_scores_matches_closed_form():
    from statistics import NormalDist
    rng = np.random.default_rng(0)
    gen = rng.normal(1.0, 0.5, 10_000)
    imp = rng.normal(3.0, 0.5, 10_000)
    thr = NormalDist(3.0, 0.5).inv_cdf(0.01)
    expected = NormalDist(1.0, 0.5).cdf(thr)
    assert tar_at_far_scores(gen, imp, 0.01) == pytest.approx(expected, abs=0.02)


def test_tar_perfect_separation():
    assert tar_at_far_scores(np.zeros(10), np.ones(1000), 0.01) == 1.0
    assert tar_at_far_scores(np.ones(10), np.zeros(1000), 0.01) == 0.0


def test_verification_uses_all_pairs():
    p = np.array([[0.0], [5.0]])
    g = np.array([[0.1], [5.1], [9.0]])
    assert verification_tar(p, ["a", "b"], g, ["a", "b", "c"], 0.01) == 1.0


def test_relative_performance():
    assert relative_performance(28.38, 55.3) == pytest.approx(0.51, abs=0.005)
    with pytest.warns(UserWarning):
        assert relative_performance(0.3, 0.0) is None


def test_scenario_validation_and_names():
    assert ScenarioConfig(("top", "bottom")).name == "top+bottom"
    assert ScenarioConfig(("top", "bottom"), restrict_to="bottom").name == "bottom"
    assert ScenarioConfig(("top",), flip_mid_video=True).name == "top/flip"
    assert ScenarioConfig(("top",), amount_range_override=(0.1, 0.3)).name == "top@10-30"
    with pytest.raises(ValueError):
        ScenarioConfig(("top",), restrict_to="middle")
    with pytest.raises(ValueError):
        ScenarioConfig(("dynamic_lr",), flip_mid_video=True)
    with pytest.raises(ValueError):
        ScenarioConfig(("sideways",))
    with pytest.raises(ValueError):
        ScenarioConfig.from_dict({"eval_kinds": ["top"], "bogus": 1})
    sc = ScenarioConfig(("top",), amount_range_override=(0.2, 0.4), repeats=3)
    assert ScenarioConfig.from_dict(sc.to_dict()) == sc


def test_report_invariants_detect_violations():
    ok = EvalReport({1: 0.2, 5: 0.5, 20: 0.9}, {0.01: 0.3}, rp={"rank1": 0.4})
    assert ok.check_invariants() == []
    bad = EvalReport({1: 0.6, 5: 0.5}, {0.01: 1.3}, rp={"rank1": -1})
    assert len(bad.check_invariants()) == 3
    assert EvalReport.from_dict(ok.to_dict()) == ok


@pytest.fixture(scope="module")
def pixel_setup():
    seqs, _ = generate_sequences(10, 2, 16, 4)
    ds = SilhouetteDataset.from_sequences(seqs)
    torch.manual_seed(0)
    return PixelStatsBackbone().eval(), ds, build_split(ds, "grew_local", 0)


def test_run_protocol_deterministic_and_replayable(pixel_setup):
    model, ds, sp = pixel_setup
    sc = ScenarioConfig(("top", "bottom"), repeats=2)
    a = run_protocol(model, ds, sp, sc, seed=3)
    b = run_protocol(model, ds, sp, sc, seed=3)
    assert a.to_json() == b.to_json()
    assert len(a.manifest) == 2 and len(a.manifest[0]["probes"]) == len(sp.probes)
    assert a.check_invariants() == []
    c = run_protocol(model, ds, sp, sc, seed=4)
    assert c.manifest != a.manifest


def test_allowed_kinds_guard(pixel_setup):
    model, ds, sp = pixel_setup
    with pytest.raises(ValueError):
        run_protocol(model, ds, sp, ScenarioConfig(("middle",)), allowed_kinds=("none", "top"))


def test_compare_fills_rp(pixel_setup):
    model, ds, sp = pixel_setup
    cmp = compare_methods({"px": model}, ds, sp, [ScenarioConfig(("top",))], seed=0)
    hp = cmp.reports[("px", HOLISTIC.name)]
    op = cmp.reports[("px", "top")]
    assert hp.rp["rank1"] == pytest.approx(1.0) or hp.rank_k[1] == 0
    if hp.rank_k[1] > 0:
        assert op.rp["rank1"] == pytest.approx(op.rank_k[1] / hp.rank_k[1])
    assert "rank1" in cmp.to_csv().splitlines()[0]


def test_rank_k_beyond_gallery_is_one():
    rng = np.random.default_rng(5)
    acc, _ = rank_retrieval(rng.normal(size=(4, 3)), ["a", "b", "c", "a"], rng.normal(size=(3, 3)),
                            ["a", "b", "c"], ks=(1, 3, 20))
    assert acc[3] == 1.0 and acc[20] == 1.0


def test_rank_retrieval_rejects_empty_gallery():
    with pytest.raises(ValueError):
        rank_retrieval(np.zeros((1, 2)), ["a"], np.zeros((0, 2)), [])


def test_tar_identical_distributions_near_far():
    rng = np.random.default_rng(1)
    vals = [tar_at_far_scores(rng.normal(size=2000), rng.normal(size=20000), 0.01) for _ in range(5)]
    assert abs(np.mean(vals) - 0.01) < 0.005


@given(st.floats(0.0, 100.0), st.floats(0.01, 100.0), st.floats(0.01, 100.0))
def test_rp_scale_covariant(op, hp, c):
    assert relative_performance(op * c, hp * c) == pytest.approx(relative_performance(op, hp), rel=1e-9)


def test_rp_trivial_values():
    assert relative_performance(55.3, 55.3) == 1.0
    assert relative_performance(0.0, 55.3) == 0.0


def test_none_scenario_equals_holistic(pixel_setup):
    model, ds, sp = pixel_setup
    a = run_protocol(model, ds, sp, HOLISTIC, seed=1)
    b = run_protocol(model, ds, sp, ScenarioConfig(("none",)), seed=9)
    assert a.rank_k == b.rank_k and a.tar_at_far == b.tar_at_far
