import json

import pytest
import yaml

from mimicgait import checkpoint as ckpt
from mimicgait.cli import main
from mimicgait.config import ConfigError, RunConfig, from_dict, load, toy_preset

TINY = {
    "data": {"identities": 6, "seqs_per_id": 3, "frames": 12},
    "backbone": {"channels": [4, 8, 8]},
    "teacher": {"iterations": 3, "batch_identities": 3, "seqs_per_identity": 2, "clip_lo": 8, "clip_hi": 8},
    "baseline": {"iterations": 3, "batch_identities": 3, "seqs_per_identity": 2, "clip_lo": 8, "clip_hi": 8},
    "ven": {"iterations": 3, "batch_size": 4, "clip_frames": 8},
    "distill": {"iterations": 3, "batch_identities": 3, "seqs_per_identity": 2, "clip_lo": 8, "clip_hi": 8},
    "adapt": {"ven_iterations": 2},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    data = d / "data"
    assert main(["synth-data", "--identities", "6", "--seqs-per-id", "3", "--frames", "12",
                 "--seed", "7", "--out", str(data), "--config", str(cfg)]) == 0
    common = ["--config", str(cfg), "--seed", "1", "--data", str(data)]
    assert main(["pretrain", *common, "--out", str(d / "teacher.pt")]) == 0
    assert main(["pretrain", "--ven", *common, "--out", str(d / "ven.pt")]) == 0
    assert main(["distill", "--teacher", str(d / "teacher.pt"), "--ven", str(d / "ven.pt"),
                 "--kinds", "top,bottom", "--margin", "0.05", *common, "--out", str(d / "mimic.pt")]) == 0
    return d, cfg, data, common


def test_synth_data_layout(workdir):
    d, _, data, _ = workdir
    assert (data / "split.json").is_file()
    assert (data / "walkers.json").is_file()
    assert len(list(data.rglob("meta.json"))) == 18


def test_checkpoints_are_self_describing(workdir):
    d, *_ = workdir
    raw = ckpt.read_raw(d / "teacher.pt")
    for key in ("architecture", "embedding_dim", "state_dict", "config", "seed", "version"):
        assert key in raw
    assert raw["provenance"]["config"]["backbone"]["channels"] == [4, 8, 8]
    m, meta = ckpt.load(d / "mimic.pt", expect="mimic")
    assert meta["uses_ven"] and m.uses_ven
    assert (d / "mimic.config.yaml").is_file()


def test_evaluate_json_and_report(workdir, capsys):
    d, cfg, data, common = workdir
    out = d / "rep.json"
    capsys.readouterr()
    assert main(["evaluate", "--model", str(d / "mimic.pt"), "--scenario", "top,bottom", "--json",
                 "--out", str(out), *common]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc["rank_k"]) == {"1", "5", "20"}
    assert doc["protocol_name"] == "top+bottom"
    assert main(["report", str(out), "--out", str(d / "figs")]) == 0
    assert (d / "figs" / "table.csv").is_file()
    assert list((d / "figs").glob("*.png"))


def test_evaluate_is_reproducible(workdir, capsys):
    d, cfg, data, common = workdir
    outs = []
    for _ in range(2):
        capsys.readouterr()
        assert main(["evaluate", "--model", str(d / "teacher.pt"), "--json", *common]) == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1]


def test_evaluate_without_model_fails(workdir, capsys):
    _, _, data, _ = workdir
    assert main(["evaluate", "--data", str(data)]) != 0
    assert "usage" in capsys.readouterr().err


def test_missing_checkpoint_is_structured_error(workdir, capsys):
    d, _, data, common = workdir
    assert main(["evaluate", "--model", str(d / "nope.pt"), *common]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "CheckpointError" and "not found" in err["message"]


def test_unknown_subcommand():
    assert main(["frobnicate"]) != 0


def test_compare_and_ablation_flags(workdir, capsys):
    d, cfg, data, common = workdir
    assert main(["distill", "--teacher", str(d / "teacher.pt"), "--no-ven", "--loss", "l2kd", "--xe",
                 *common, "--out", str(d / "l2.pt")]) == 0
    assert not ckpt.load(d / "l2.pt")[0].uses_ven
    capsys.readouterr()
    assert main(["compare", "--models", f"t={d / 'teacher.pt'}", f"l2={d / 'l2.pt'}", "--json",
                 "--scenarios", "top,bottom", "middle", *common]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert {(r["model"], r["scenario"]) for r in rows} >= {("t", "holistic"), ("l2", "middle")}
    assert main(["compare", "--models", f"t={d / 'teacher.pt'}", "--scenarios", "top,bottom", *common,
                 "--out", str(d / "cmp")]) == 0
    assert main(["report", str(d / "cmp"), "--out", str(d / "cmp_fig")]) == 0
    assert "t,top+bottom" in (d / "cmp_fig" / "table.csv").read_text()


def test_pretrain_baselines_and_adapt(workdir):
    d, cfg, data, common = workdir
    assert main(["pretrain", "--occluded-kinds", "top,bottom", *common, "--out", str(d / "b2.pt")]) == 0
    assert main(["pretrain", "--occluded-kinds", "top,bottom", "--guide", str(d / "ven.pt"), *common,
                 "--out", str(d / "oa.pt")]) == 0
    assert ckpt.read_raw(d / "oa.pt")["role"] == "occ_aware"
    assert main(["adapt", "--model", str(d / "mimic.pt"), "--teacher", str(d / "teacher.pt"),
                 "--new-kinds", "middle", *common, "--out", str(d / "ad.pt")]) == 0
    ad, _ = ckpt.load(d / "ad.pt")
    assert ad.ven.class_set == ("none", "top", "bottom", "middle")


def test_occlude_manifest(workdir):
    d, _, data, common = workdir
    assert main(["occlude", *common, "--kinds", "top", "--out", str(d / "occ")]) == 0
    doc = json.loads((d / "occ" / "manifest.json").read_text())
    assert len(doc["records"]) == 18
    assert {r["spec"]["kind"] for r in doc["records"]} == {"top"}


# --- config ------------------------------------------------------------------

def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown"):
        from_dict({"teacher": {"learnin_rate": 0.1}})
    with pytest.raises(ConfigError, match="unknown"):
        from_dict({"bogus": 1})


def test_config_rejects_bad_schema_version():
    with pytest.raises(ConfigError, match="schema_version"):
        from_dict({"schema_version": 99})


def test_config_roundtrip_and_overrides(tmp_path):
    cfg = toy_preset()
    path = cfg.save(tmp_path / "c.yaml")
    assert load(path) == cfg
    over = load(path, ["distill.margin=0.1", "ven.class_set=[none,top]"])
    assert over.distill.margin == 0.1 and over.ven.class_set == ("none", "top")
    with pytest.raises(ConfigError):
        load(path, ["distill.nope=1"])


def test_config_type_errors():
    with pytest.raises(ConfigError):
        from_dict({"seed": "zero"})
    with pytest.raises(ConfigError):
        from_dict({"distill": {"loss": "bogus"}})


def test_schema_violation_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("teacher:\n  foo: 1\n")
    assert main(["synth-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert "unknown" in capsys.readouterr().err


def test_with_seed_offsets():
    cfg = RunConfig().with_seed(5)
    assert (cfg.teacher.seed, cfg.baseline.seed, cfg.ven.seed, cfg.distill.seed) == (5, 105, 205, 305)
