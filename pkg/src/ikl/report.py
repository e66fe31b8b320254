"""Comparison tables and accuracy curves built from finished run directories (read-only)."""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass
from pathlib import Path

from .records import read_jsonl

MISSING = "-"


@dataclass
class RunRecords:
    path: Path
    method: str
    manifest: dict
    records: list[dict]

    @property
    def overall_metric(self) -> str:
        return "aaa" if any(r["metric"] == "aaa" for r in self.records) else "a_mre"


def load_run(path: str | Path) -> RunRecords:
    path = Path(path)
    manifest_file = path / "manifest.json"
    if not manifest_file.exists():
        raise FileNotFoundError(f"{path} is not a run directory (no manifest.json)")
    with open(manifest_file, encoding="utf-8") as fh:
        manifest = json.load(fh)
    return RunRecords(path, manifest["method"], manifest, read_jsonl(path / "metrics.jsonl"))


def _stats(rows: list[dict]) -> dict:
    vals = [r["value"] for r in rows if r["value"] is not None]
    return {
        "mean": statistics.fmean(vals) if vals else None,
        "std": statistics.pstdev(vals) if len(vals) > 1 else (0.0 if vals else None),
        "n": len(vals),
        "record_ids": [r["record_id"] for r in rows],
    }


def build_grid(runs: list[RunRecords]) -> list[dict]:
    """One row per (method, step): overall metric, AT and MT as mean/std over seeds."""
    if not runs:
        raise ValueError("no runs to report")
    grid = []
    for run in runs:
        overall = run.overall_metric
        steps = sorted({r["step"] for r in run.records})
        for step in steps:
            row = {"method": run.method, "step": step, "run": str(run.path)}
            for name in (overall, "at", "mt"):
                sel = [r for r in run.records if r["step"] == step and r["metric"] == name]
                row["overall" if name == overall else name] = _stats(sel)
            row["metric"] = overall
            grid.append(row)
    return grid


def _cell(stats: dict) -> str:
    if stats["mean"] is None:
        return MISSING
    if stats["n"] > 1:
        return f"{stats['mean']:.2f} ± {stats['std']:.2f}"
    return f"{stats['mean']:.2f}"


def format_grid(grid: list[dict]) -> str:
    header = ["method", "step", "metric", "value", "AT", "MT"]
    rows = [[r["method"], str(r["step"]), r["metric"].upper(), _cell(r["overall"]), _cell(r["at"]), _cell(r["mt"])] for r in grid]
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(header), line(["-" * w for w in widths])]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


def plot_curves(runs: list[RunRecords], out_dir: Path) -> list[Path]:
    """Overall accuracy per step for every method, plus per-group curves per method."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    fig, ax = plt.subplots(figsize=(6, 4))
    for run in runs:
        overall = run.overall_metric
        steps = sorted({r["step"] for r in run.records})
        means = [_stats([r for r in run.records if r["step"] == s and r["metric"] == overall])["mean"] for s in steps]
        ax.plot(steps, means, marker="o", label=run.method)
        ax.set_ylabel(overall.upper())
    ax.set_xlabel("step")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = out_dir / "overall.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    paths.append(path)

    for run in runs:
        groups = sorted({int(r["metric"].split("_")[1]) for r in run.records if r["metric"].startswith("group_")})
        if not groups:
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        for g in groups:
            steps = sorted({r["step"] for r in run.records if r["metric"] == f"group_{g}"})
            means = [_stats([r for r in run.records if r["step"] == s and r["metric"] == f"group_{g}"])["mean"] for s in steps]
            ax.plot(steps, means, marker="o", label=f"group {g}")
        ax.set_xlabel("step")
        ax.set_ylabel("group accuracy")
        ax.set_title(run.method)
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = out_dir / f"groups_{run.method}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def write_report(run_paths: list[str | Path], out_dir: str | Path, plots: bool = True) -> dict[str, Path]:
    """Write ``summary.txt``, ``summary.json`` and plots into ``out_dir``; runs are only read."""
    runs = [load_run(p) for p in run_paths]
    grid = build_grid(runs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {"txt": out_dir / "summary.txt", "json": out_dir / "summary.json"}
    written["txt"].write_text(format_grid(grid), encoding="utf-8")
    written["json"].write_text(json.dumps({"rows": grid}, indent=2) + "\n", encoding="utf-8")
    if plots:
        for p in plot_curves(runs, out_dir):
            written[p.stem] = p
    return written
