"""Static report figures: Rank-K curves, RP bars and range-sweep lines."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import EvalReport  # noqa: E402


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def rank_k_curves(reports: Mapping[str, EvalReport], path: Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for label, rep in reports.items():
        ks = sorted(rep.rank_k)
        ax.plot(ks, [100 * rep.rank_k[k] for k in ks], marker="o", label=label)
    ax.set_xscale("log")
    ax.set_xlabel("rank k")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, path)


def rp_bars(reports: Mapping[str, EvalReport], path: Path, metric: str = "rank1", title: str = "") -> Path:
    labels = [k for k, r in reports.items() if r.rp.get(metric) is not None]
    fig, ax = plt.subplots(figsize=(max(3.5, 0.6 * len(labels) + 1.5), 3.5))
    ax.bar(range(len(labels)), [reports[k].rp[metric] for k in labels])
    ax.axhline(1.0, color="grey", lw=0.8, ls="--")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel(f"RP ({metric})")
    ax.set_title(title)
    return _save(fig, path)


def range_sweep(series: Mapping[str, Sequence[tuple[str, float]]], path: Path, title: str = "") -> Path:
    """``series`` maps a model name to (range label, Rank-1) points in plotting order."""
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for name, pts in series.items():
        ax.plot([p[0] for p in pts], [100 * p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel("occlusion amount range")
    ax.set_ylabel("Rank-1 (%)")
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, path)


_RANGE = re.compile(r"@(\d+)-(\d+)$")


def render_all(entries: Sequence[tuple[str, str, EvalReport]], out_dir: Path) -> list[Path]:
    """Figures for (model, scenario, report) triples; one Rank-K / RP plot per scenario."""
    out_dir = Path(out_dir)
    by_scenario: dict[str, dict[str, EvalReport]] = {}
    for model, scen, rep in entries:
        by_scenario.setdefault(scen, {})[model] = rep
    written = []
    for scen, reps in by_scenario.items():
        slug = re.sub(r"[^A-Za-z0-9]+", "_", scen).strip("_") or "scenario"
        written.append(rank_k_curves(reps, out_dir / f"rank_k_{slug}.png", scen))
        if any(r.rp.get("rank1") is not None for r in reps.values()) and scen != "holistic":
            written.append(rp_bars(reps, out_dir / f"rp_{slug}.png", title=scen))
    sweep: dict[str, list] = {}
    for model, scen, rep in entries:
        m = _RANGE.search(scen)
        if m:
            sweep.setdefault(model, []).append((int(m.group(1)), f"{m.group(1)}-{m.group(2)}%", rep.rank_k[1]))
    if sweep:
        series = {k: [(lab, v) for _, lab, v in sorted(pts, reverse=True)] for k, pts in sweep.items()}
        written.append(range_sweep(series, out_dir / "range_sweep.png"))
    return written
