"""Command-line entry point: ``mimicgait <subcommand> ...``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import checkpoint as ckpt
from . import config as config_mod
from . import occlusion as occ
from . import pipeline
from .datasets import ProtocolSplit, build_split, ingest_external
from .evaluation import HOLISTIC, Comparison, EvalReport, ScenarioConfig, compare_methods, fill_rp, run_protocol
from .silhouette import SilhouetteError, write_packed
from .toy import generate_toy_dataset

log = logging.getLogger("mimicgait")

SPLIT_FILE = "split.json"


class CliError(Exception):
    pass


# --- helpers ----------------------------------------------------------------

def _kinds(text: str) -> tuple[str, ...]:
    kinds = tuple(k.strip() for k in text.split(",") if k.strip())
    bad = [k for k in kinds if k not in occ.ALL_KINDS]
    if not kinds or bad:
        raise CliError(f"bad occlusion kinds {text!r}; choose from {list(occ.ALL_KINDS)}")
    return kinds


def _resolve(args) -> config_mod.RunConfig:
    cfg = config_mod.load(getattr(args, "config", None), getattr(args, "set", None) or [])
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _data(args):
    if not args.data:
        raise CliError("--data is required")
    ds = ingest_external(Path(args.data))
    split_path = Path(args.split) if getattr(args, "split", None) else Path(args.data) / SPLIT_FILE
    split = ProtocolSplit.load(split_path) if split_path.is_file() else None
    return ds, split


def _input_hash(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for p in files:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _provenance(cfg, args, **inputs) -> dict:
    return {"config": cfg.to_dict(), "seed": cfg.seed, "version": ckpt.version_string(),
            "argv": list(getattr(args, "_argv", [])),
            "inputs": {k: _input_hash(v) for k, v in inputs.items() if v}}


def _write_config_beside(out: Path, cfg) -> None:
    out = Path(out)
    target = (out if out.is_dir() else out.parent) / (f"{out.stem}.config.yaml" if not out.is_dir() else "config.yaml")
    target.parent.mkdir(parents=True, exist_ok=True)
    doc = cfg.to_dict()
    doc["_version"] = ckpt.version_string()
    target.write_text(yaml.safe_dump(doc, sort_keys=False))


def _load_model(path):
    if not path:
        raise CliError("--model is required")
    obj, meta = ckpt.load(Path(path))
    if meta["kind"] == "ven":
        raise CliError(f"{path}: a VEN checkpoint is not a gait encoder")
    return obj, meta


def _scenario(args) -> ScenarioConfig:
    if getattr(args, "scenario", None):
        p = Path(args.scenario)
        if p.is_file():
            d = yaml.safe_load(p.read_text()) or {}
        else:
            d = {"eval_kinds": list(_kinds(args.scenario))}
        sc = ScenarioConfig.from_dict(d)
    else:
        sc = ScenarioConfig()
    if getattr(args, "repeats", None):
        sc = ScenarioConfig.from_dict({**sc.to_dict(), "repeats": args.repeats})
    return sc


# --- subcommands --------------------------------------------------------------

def cmd_synth_data(args) -> int:
    cfg = _resolve(args)
    d = cfg.data
    ids = args.identities or d.identities
    per = args.seqs_per_id or d.seqs_per_id
    frames = args.frames or d.frames
    out = generate_toy_dataset(ids, per, frames, cfg.seed, Path(args.out))
    split = build_split(ingest_external(out), args.protocol or d.protocol, cfg.seed, d.holdout_fraction)
    split.save(out / SPLIT_FILE)
    _write_config_beside(out, cfg)
    print(f"wrote {ids * per} sequences and {SPLIT_FILE} to {out}")
    return 0


def cmd_occlude(args) -> int:
    cfg = _resolve(args)
    ds, _ = _data(args)
    kinds = _kinds(args.kinds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(ds))
    records = []
    for key, s in zip(ds.keys(), seeds):
        seq = ds[key]
        spec = occ.sample_spec(kinds, np.random.default_rng(s), amount_range=cfg.distill.amount_range)
        records.append({"subject_id": key[0], "sequence_id": key[1], "source": str(Path(args.data)),
                        "spec": spec.to_record()})
        if args.write_sequences:
            o, _ = occ.apply(seq, spec)
            write_packed(o, out / f"{key[0]}__{key[1]}.sil")
    occ.write_manifest(records, out / "manifest.json")
    print(f"wrote manifest with {len(records)} records to {out / 'manifest.json'}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    ds, split = _data(args)
    train = pipeline.training_sequences(ds, split)
    prov = _provenance(cfg, args, data=args.data)
    if args.ven:
        ven = pipeline.fit_ven(cfg, train)
        ckpt.save_ven(args.out, ven, seed=cfg.ven.seed, provenance=prov)
        print(f"VEN saved to {args.out}")
    elif args.occluded_kinds:
        guide = ckpt.load(Path(args.guide), expect="ven")[0] if args.guide else None
        model = pipeline.fit_baseline(cfg, train, _kinds(args.occluded_kinds), guide)
        cfgd = {"train": vars(cfg.baseline), "kinds": args.occluded_kinds}
        if guide is not None:
            ckpt.save_mimic(args.out, model, cfgd, cfg.baseline.seed, role="occ_aware", provenance=prov)
        else:
            ckpt.save_encoder(args.out, model, cfgd, cfg.baseline.seed, role="baseline2", provenance=prov)
        print(f"occluded baseline saved to {args.out}")
    else:
        model = pipeline.fit_teacher(cfg, train)
        ckpt.save_encoder(args.out, model, {"train": vars(cfg.teacher)}, cfg.teacher.seed,
                          role="teacher", provenance=prov)
        print(f"teacher saved to {args.out}")
    _write_config_beside(Path(args.out), cfg)
    return 0


def cmd_distill(args) -> int:
    overrides = list(args.set or [])
    if args.kinds:
        overrides.append(f"distill.kinds=[{','.join(_kinds(args.kinds))}]")
    for flag, key in ((args.margin, "margin"), (args.loss, "loss")):
        if flag is not None:
            overrides.append(f"distill.{key}={flag}")
    if args.xe:
        overrides.append("distill.xe=true")
    if args.no_ven:
        overrides.append("distill.use_ven=false")
    args.set = overrides
    cfg = _resolve(args)
    ds, split = _data(args)
    teacher, _ = ckpt.load(Path(args.teacher))
    ven = None
    if cfg.distill.use_ven:
        if not args.ven:
            raise CliError("--ven is required unless --no-ven is given")
        ven, _ = ckpt.load(Path(args.ven), expect="ven")
    mimic = pipeline.fit_mimic(cfg, teacher, ven, pipeline.training_sequences(ds, split))
    ckpt.save_mimic(args.out, mimic, cfg.distill.to_dict(), cfg.distill.seed,
                    provenance=_provenance(cfg, args, data=args.data, teacher=args.teacher, ven=args.ven))
    _write_config_beside(Path(args.out), cfg)
    print(f"mimic saved to {args.out}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _resolve(args)
    ds, split = _data(args)
    mimic, _ = ckpt.load(Path(args.model), expect="mimic")
    teacher, _ = ckpt.load(Path(args.teacher))
    kinds = _kinds(args.new_kinds) if args.new_kinds else None
    base_kinds = tuple(mimic.ven.class_set[1:]) if mimic.uses_ven else cfg.distill.kinds
    cfg = config_mod.apply_overrides(cfg, [f"distill.kinds=[{','.join(base_kinds)}]"])
    model, ven = pipeline.fit_adapt(cfg, mimic, teacher, None, pipeline.training_sequences(ds, split),
                                    kinds, args.iterations)
    ckpt.save_mimic(args.out, model, cfg.distill.to_dict(), cfg.distill.seed + 1, role="adapted",
                    provenance=_provenance(cfg, args, data=args.data, model=args.model))
    _write_config_beside(Path(args.out), cfg)
    print(f"adapted mimic saved to {args.out}")
    return 0


def _need_split(split):
    if split is None:
        raise CliError(f"no split file; pass --split or put {SPLIT_FILE} in the data directory")
    return split


def cmd_evaluate(args) -> int:
    model, meta = _load_model(args.model)
    cfg = _resolve(args)
    ds, split = _data(args)
    split = _need_split(split)
    sc = _scenario(args)
    hp = run_protocol(model, ds, split, HOLISTIC, cfg.seed, model_id=meta.get("role", "model"))
    fill_rp(hp, hp)
    rep = hp if sc.holistic else run_protocol(model, ds, split, sc, cfg.seed, holistic=hp,
                                             model_id=meta.get("role", "model"))
    doc = rep.to_dict()
    doc["provenance"] = _provenance(cfg, args, data=args.data, model=args.model)
    text = json.dumps(doc, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    if args.json:
        print(text)
    else:
        r1 = rep.rank_k[1]
        print(f"{sc.name}: rank1 {100 * r1:.2f}%  rank5 {100 * rep.rank_k[5]:.2f}%  "
              f"RP {rep.rp.get('rank1')}")
    return 0


def cmd_compare(args) -> int:
    cfg = _resolve(args)
    ds, split = _data(args)
    split = _need_split(split)
    models = {}
    for item in args.models:
        name, _, path = item.partition("=")
        if not path:
            raise CliError(f"--models entries are name=checkpoint, got {item!r}")
        models[name] = _load_model(path)[0]
    scenarios = [ScenarioConfig.from_dict({"eval_kinds": list(_kinds(s)), "repeats": args.repeats})
                 for s in args.scenarios]
    cmp = compare_methods(models, ds, split, scenarios, cfg.seed)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(cmp.to_json(indent=1))
        (out / "comparison.csv").write_text(cmp.to_csv())
        _write_config_beside(out, cfg)
    print(cmp.to_json(indent=1) if args.json else cmp.to_csv(), end="")
    return 0


def _read_reports(paths) -> list[tuple[str, str, EvalReport]]:
    entries = []
    for p in paths:
        p = Path(p)
        if p.is_dir():  # a compare --out directory
            p = p / "comparison.json"
        doc = json.loads(p.read_text())
        if isinstance(doc, list):
            for e in doc:
                entries.append((e["model"], e["scenario"], EvalReport.from_dict(e["report"])))
        else:
            doc.pop("provenance", None)
            rep = EvalReport.from_dict(doc)
            entries.append((rep.model_ids[0] if rep.model_ids else Path(p).stem, rep.protocol_name, rep))
    return entries


def cmd_report(args) -> int:
    from .plots import render_all
    entries = _read_reports(args.inputs)
    if not entries:
        raise CliError("no reports given")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = Comparison({(m, s): r for m, s, r in entries})
    (out / "table.csv").write_text(table.to_csv())
    bad = [f"{m}/{s}: {v}" for m, s, r in entries for v in r.check_invariants()]
    if bad:
        raise CliError("report invariant violations: " + "; ".join(bad))
    written = render_all(entries, out)
    print(f"wrote table.csv and {len(written)} figure(s) to {out}")
    return 0


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mimicgait", description="Occluded gait recognition toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--config", type=Path, default=None, help="RunConfig YAML")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth-data", cmd_synth_data, "generate the toy walker dataset")
    sp.add_argument("--identities", type=int)
    sp.add_argument("--seqs-per-id", type=int)
    sp.add_argument("--frames", type=int)
    sp.add_argument("--protocol", choices=("grew_local", "holdout"))
    sp.add_argument("--out", required=True)

    sp = add("occlude", cmd_occlude, "write an occlusion manifest")
    sp.add_argument("--data", required=True)
    sp.add_argument("--kinds", default="top,bottom")
    sp.add_argument("--write-sequences", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("pretrain", cmd_pretrain, "train the teacher, the VEN (--ven) or an occluded baseline")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split")
    sp.add_argument("--ven", action="store_true", help="train the visibility network instead")
    sp.add_argument("--occluded-kinds", help="train on occluded clips (baseline)")
    sp.add_argument("--guide", help="VEN checkpoint for the occlusion-aware baseline")
    sp.add_argument("--out", required=True)

    sp = add("distill", cmd_distill, "distil a mimic network from a teacher")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--ven")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split")
    sp.add_argument("--kinds")
    sp.add_argument("--margin", type=float)
    sp.add_argument("--loss", choices=("mickd", "l2kd", "none"))
    sp.add_argument("--xe", action="store_true")
    sp.add_argument("--no-ven", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("adapt", cmd_adapt, "adapt a mimic to new occlusion kinds")
    sp.add_argument("--model", required=True)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split")
    sp.add_argument("--new-kinds")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "score one model under one scenario")
    sp.add_argument("--model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split")
    sp.add_argument("--scenario", help="scenario YAML file or comma-separated kinds")
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--out")
    sp.add_argument("--json", action="store_true")

    sp = add("compare", cmd_compare, "score several models under several scenarios")
    sp.add_argument("--models", nargs="+", required=True, metavar="NAME=CKPT")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split")
    sp.add_argument("--scenarios", nargs="+", default=["top,bottom"])
    sp.add_argument("--repeats", type=int, default=1)
    sp.add_argument("--out")
    sp.add_argument("--json", action="store_true")

    sp = add("report", cmd_report, "render CSV tables and plots from report files")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args._argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    if args.command == "evaluate" and not args.model:
        print("error: evaluate requires --model <checkpoint>", file=sys.stderr)
        print(parser.format_usage().strip(), file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except (CliError, ckpt.CheckpointError, config_mod.ConfigError, SilhouetteError, occ.OcclusionError,
            ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
