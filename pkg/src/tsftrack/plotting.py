"""Success / precision plots rendered straight to files (Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "figure.figsize": (4.5, 3.4),
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.linewidth": 0.6,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.6,
    "legend.fontsize": 8,
    "legend.frameon": False,
    # fixed metadata keeps re-rendered files identical
    "svg.hashsalt": "tsftrack",
}

_AXES = {
    "success": ("Overlap threshold", "Success rate", (0.0, 1.0)),
    "precision": ("Location error threshold (px)", "Precision", (0.0, 50.0)),
}


def _label(name: str, kind: str, curve: dict) -> str:
    if kind == "success":
        return f"{name} [{curve['auc']:.3f}]"
    th, vals = curve["thresholds"], curve["values"]
    at20 = vals[min(range(len(th)), key=lambda i: abs(th[i] - 20.0))]
    return f"{name} [{at20:.3f}]"


def plot_curves(series: list[tuple[str, dict]], kind: str, path, title: str | None = None) -> Path:
    """Draw one or more curves (``(name, curve_dict)``) of ``kind``
    ("success" or "precision") and save to ``path``. Returns the path."""
    if kind not in _AXES:
        raise ValueError(f"unknown plot kind {kind!r}")
    xlabel, ylabel, xlim = _AXES[kind]
    path = Path(path)
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        order = sorted(series, key=lambda s: -s[1]["auc"]) if kind == "success" else series
        for name, curve in order:
            ax.plot(curve["thresholds"], curve["values"], label=_label(name, kind, curve))
        ax.set_xlim(*xlim)
        ax.set_ylim(0.0, 1.0)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(loc="lower left" if kind == "success" else "lower right")
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path


def report_plots(report: dict, out_dir, prefix: str = "") -> list[Path]:
    """Success and precision plots for one report."""
    out_dir = Path(out_dir)
    name = report["tracker"]
    title = report.get("dataset") or None
    return [plot_curves([(name, report["curves"][k])], k, out_dir / f"{prefix}{k}.png", title)
            for k in ("success", "precision")]


def compare_plots(reports: list[dict], out_dir, prefix: str = "compare_") -> list[Path]:
    """Overlay the curves of several reports, one series each."""
    out_dir = Path(out_dir)
    return [plot_curves([(r["tracker"], r["curves"][k]) for r in reports], k, out_dir / f"{prefix}{k}.png")
            for k in ("success", "precision")]
