import pytest

from mimicgait import checkpoint as ckpt
from mimicgait.config import from_dict
from mimicgait.experiments import Suite, config_hash, is_non_decreasing, summarise

from test_cli import TINY


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    return Suite(seeds=(0, 1), repeats=1, cache=tmp_path_factory.mktemp("cache"), base=from_dict(TINY))


def test_suite_tables_and_cache(suite):
    t = suite.ordering()
    assert set(t["median"]) == {"baseline1", "baseline2", "occ_aware", "mimic"}
    assert all(len(v) == 2 for v in t["rank1"].values())
    run = suite.run(0)
    assert (run.dir / "mimic.pt").exists() is False and (run.dir / "mickd.pt").exists()
    assert set(run.timings) >= {"teacher", "ven", "baseline2", "occ_aware", "mickd"}
    # a fresh suite on the same cache loads instead of retraining
    again = Suite(seeds=(0,), repeats=1, cache=suite.cache, base=suite.base)
    h = ckpt.read_raw(run.dir / "teacher.pt")["state_dict"]
    assert all((again.run(0).teacher.state_dict()[k] == v).all() for k, v in h.items())
    assert "reports" not in summarise(t)


def test_suite_ablation_adapt_and_sweep(suite):
    assert set(suite.ablation()["median"]) == {"no_kd", "l2kd", "mickd", "mickd_xe"}
    z = suite.zero_shot_middle()
    assert set(z["median"]) == {"baseline2", "mimic", "adapted"}
    assert suite.run(0).adapted.ven.class_set == ("none", "top", "bottom", "middle")
    sweep = suite.range_sweep()
    assert list(sweep) == ["40-60", "30-50", "20-40", "10-30"]


def test_config_hash_ignores_seed(suite):
    assert config_hash(suite.base.with_seed(3)) == config_hash(suite.base.with_seed(4))
    assert config_hash(suite.base) != config_hash(from_dict({**TINY, "distill": {**TINY["distill"], "margin": 0.1}}))


def test_non_decreasing():
    assert is_non_decreasing([0.1, 0.1, 0.3])
    assert not is_non_decreasing([0.3, 0.2])
    assert is_non_decreasing([0.3, 0.29], tol=0.02)


def test_nested_stage_time_is_not_double_counted(suite):
    import time
    run = suite.run(1)
    inner = lambda: run._cached("inner_probe", lambda: time.sleep(0.3) or 1, lambda p, o: None)
    run._cached("outer_probe", lambda: (inner(), time.sleep(0.1))[0], lambda p, o: None)
    assert run.timings["inner_probe"] >= 0.3
    assert 0.1 <= run.timings["outer_probe"] < 0.25
