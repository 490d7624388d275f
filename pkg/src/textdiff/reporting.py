"""Aggregation of finished runs into tables and static figures.

Reads metrics.csv / sweep.csv files that runs already wrote; never
recomputes metrics. Every figure is rendered to a file with a delimited
data file alongside it, so plots can be checked structurally.
"""

import csv
import json
from pathlib import Path
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import MissingMetricsError
from .heads import read_metrics_csv


def _read_record(run_dir: Path) -> Optional[dict]:
    path = run_dir / "record.json"
    if path.exists():
        return json.loads(path.read_text())
    return None


def summarize_run(run_dir) -> dict:
    """One row per run: name, variant (if recorded), mean dice/iou."""
    run_dir = Path(run_dir)
    metrics = run_dir / "metrics.csv"
    if not metrics.exists():
        raise MissingMetricsError(f"{run_dir} has no metrics.csv")
    rows, mean = read_metrics_csv(metrics)
    if mean is None:
        raise MissingMetricsError(f"{metrics} has no MEAN row")
    record = _read_record(run_dir)
    return {
        "name": run_dir.name,
        "variant": record.get("variant") if record else "",
        "n_images": len(rows),
        "dice_pct": mean[1],
        "iou_pct": mean[2],
    }


def _is_sweep_dir(run_dir: Path) -> bool:
    return (run_dir / "sweep.csv").exists()


def _read_sweep_rows(run_dir: Path) -> List[dict]:
    with open(run_dir / "sweep.csv", newline="") as f:
        return list(csv.DictReader(f))


def render_sweep_plot(run_dir, out_dir) -> Dict[str, str]:
    """Dice vs step, one series per block set; emits the PNG and its data CSV.

    Series come from grid cells whose step set is a single step; if the grid
    has none, falls back to the dedicated single-step marginal table.
    """
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series: Dict[str, List[tuple]] = {}
    for row in _read_sweep_rows(run_dir):
        steps = row["steps"].split(",")
        if len(steps) == 1:
            series.setdefault(row["blocks"], []).append((int(steps[0]), float(row["dice_pct"])))
    if not series:
        marg = run_dir / "step_marginal.csv"
        if marg.exists():
            with open(marg, newline="") as f:
                pts = [(int(r["step"]), float(r["dice_pct"])) for r in csv.DictReader(f)]
            series["single-step marginal"] = pts

    data_path = out_dir / f"{run_dir.name}_dice_vs_step.csv"
    with open(data_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["blocks", "step", "dice_pct"])
        for blocks, pts in sorted(series.items()):
            for step, dice in sorted(pts):
                w.writerow([blocks, step, f"{dice:.2f}"])

    fig, ax = plt.subplots(figsize=(6, 4))
    for blocks, pts in sorted(series.items()):
        pts = sorted(pts)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"blocks {blocks}")
    ax.set_xlabel("diffusion step")
    ax.set_ylabel("Dice (%)")
    ax.set_title("Segmentation performance by step")
    ax.legend()
    fig.tight_layout()
    png_path = out_dir / f"{run_dir.name}_dice_vs_step.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"png": str(png_path), "data": str(data_path)}


def _render_comparison_plot(rows: List[dict], out_dir: Path) -> Dict[str, str]:
    data_path = out_dir / "comparison.csv"
    with open(data_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["name", "variant", "dice_pct", "iou_pct"])
        for r in rows:
            w.writerow([r["name"], r["variant"], f"{r['dice_pct']:.2f}", f"{r['iou_pct']:.2f}"])

    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows) + 2), 4))
    x = range(len(rows))
    width = 0.38
    ax.bar([i - width / 2 for i in x], [r["dice_pct"] for r in rows], width, label="Dice (%)")
    ax.bar([i + width / 2 for i in x], [r["iou_pct"] for r in rows], width, label="IoU (%)")
    ax.set_xticks(list(x))
    ax.set_xticklabels([r["name"] for r in rows], rotation=20, ha="right")
    ax.set_ylabel("percent")
    ax.set_title("Mean segmentation quality per run")
    ax.legend()
    fig.tight_layout()
    png_path = out_dir / "comparison.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"png": str(png_path), "data": str(data_path)}


def report(run_dirs, out_dir) -> dict:
    """Aggregate run directories into report.md plus figures and data files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_dirs = [Path(d) for d in run_dirs]

    metric_rows: List[dict] = []
    sweep_artifacts = []
    for d in run_dirs:
        if _is_sweep_dir(d):
            sweep_artifacts.append(render_sweep_plot(d, out_dir))
        else:
            metric_rows.append(summarize_run(d))
    metric_rows.sort(key=lambda r: r["dice_pct"], reverse=True)

    artifacts: dict = {"report": str(out_dir / "report.md")}
    lines = ["# Run comparison", ""]
    if metric_rows:
        comp = _render_comparison_plot(metric_rows, out_dir)
        artifacts["comparison"] = comp
        lines += [
            "| run | variant | images | Dice (%) | IoU (%) |",
            "| --- | --- | ---: | ---: | ---: |",
        ]
        for r in metric_rows:
            lines.append(
                f"| {r['name']} | {r['variant']} | {r['n_images']} "
                f"| {r['dice_pct']:.2f} | {r['iou_pct']:.2f} |"
            )
        lines += ["", f"![comparison]({Path(comp['png']).name})"]
    if sweep_artifacts:
        artifacts["sweeps"] = sweep_artifacts
        lines += [""]
        for art in sweep_artifacts:
            lines.append(f"![sweep]({Path(art['png']).name})")
    (out_dir / "report.md").write_text("\n".join(lines) + "\n")
    return artifacts
