"""Report figures rendered straight to PNG files.

The pipeline runs headless, so the Agg backend is forced before pyplot
loads and every function saves to a path instead of showing a window.
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

__all__ = [
    "metric_bars",
    "save_report_figures",
    "ablation_bars",
    "energy_traces",
]


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return path


def metric_bars(rows: Sequence[dict], metric: str, path,
                title: Optional[str] = None) -> Path:
    """Bar chart of one metric across report rows (occlusion bins).

    Rows are the evaluate table: each a dict with a "bin" label and
    numeric metric columns. The aggregate row is drawn in a second
    color so per-bin structure stays readable.
    """
    labels = [str(r["bin"]) for r in rows]
    values = [float(r[metric]) for r in rows]
    colors = ["#888888" if lab.lower() == "all" else "#4878cf"
              for lab in labels]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.bar(np.arange(len(values)), values, color=colors)
    ax.set_xticks(np.arange(len(values)), labels)
    ax.set_ylabel(metric)
    ax.set_title(title or metric)
    ax.grid(axis="y", alpha=0.3)
    return _finish(fig, path)


def save_report_figures(rows: Sequence[dict], metrics: Sequence[str],
                        out_dir, prefix: str = "fig_") -> List[Path]:
    """One bar chart per metric, named {prefix}{metric}.png."""
    out_dir = Path(out_dir)
    paths = []
    for m in metrics:
        safe = m.replace("/", "_")
        paths.append(metric_bars(rows, m, out_dir / f"{prefix}{safe}.png"))
    return paths


def ablation_bars(results: Dict[str, float], path,
                  ylabel: str = "mean voxel IoU") -> Path:
    """Bar chart over named experiment arms (insertion order kept)."""
    labels = list(results)
    values = [float(results[k]) for k in labels]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.bar(np.arange(len(values)), values, color="#4878cf")
    ax.set_xticks(np.arange(len(values)), labels, rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    lo = min(values)
    ax.set_ylim(max(0.0, lo - 0.05), 1.0)
    ax.grid(axis="y", alpha=0.3)
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    return _finish(fig, path)


def energy_traces(traces: Sequence[Sequence[float]], path,
                  title: str = "guidance energy") -> Path:
    """Overlayed per-run energy histories against step index."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for tr in traces:
        ax.plot(np.arange(len(tr)), tr, alpha=0.6, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("E")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _finish(fig, path)
