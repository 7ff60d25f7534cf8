"""Matplotlib figures for the per-rule finding breakdown."""

from __future__ import annotations

from pathlib import Path
from typing import Any

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}


def _save(fig, path: Path) -> Path:
    # strip the Software/date metadata so reruns produce identical files
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_rule_totals(summary: dict[str, Any], path: Path) -> Path:
    cols = summary["columns"]
    values = [summary["totals"][c] for c in cols]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 3.0))
        bars = ax.bar(cols, values, color="#4c72b0")
        ax.bar_label(bars, fontsize=7)
        ax.set_ylabel("findings")
        ax.set_title(
            f"Misconfigurations by rule ({summary['affected_apps']}/{summary['applications']} applications affected)"
        )
        ax.set_ylim(0, max(values + [1]) * 1.15)
        return _save(fig, path)


def plot_app_matrix(summary: dict[str, Any], path: Path) -> Path:
    cols = summary["columns"]
    rows = summary["rows"]
    data = np.array([[r["counts"][c] for c in cols] for r in rows], dtype=float).reshape(len(rows), len(cols))
    with plt.rc_context(STYLE):
        height = max(1.5, 0.3 * len(rows) + 1.0)
        fig, ax = plt.subplots(figsize=(6.4, height))
        im = ax.imshow(data, aspect="auto", cmap="Reds", vmin=0, vmax=max(1.0, data.max() if data.size else 1.0))
        ax.set_xticks(range(len(cols)), cols, rotation=45, ha="right")
        ax.set_yticks(range(len(rows)), [r["application_id"] for r in rows])
        for (i, j), v in np.ndenumerate(data):
            if v:
                ax.text(j, i, int(v), ha="center", va="center", fontsize=7)
        fig.colorbar(im, ax=ax, label="findings")
        return _save(fig, path)


def write_figures(summary: dict[str, Any], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [plot_rule_totals(summary, out / "rule_totals.png")]
    if summary["rows"]:
        paths.append(plot_app_matrix(summary, out / "app_rule_matrix.png"))
    return paths
