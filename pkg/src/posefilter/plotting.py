"""Figures written next to the CSV reports: accuracy curves and weight traces."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import AccuracyCurve  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.6),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def plot_accuracy_curves(curves: dict[str, AccuracyCurve], path, title: str = "") -> Path:
    """Accuracy versus error threshold, one line per label, AUC in the legend."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, curve in curves.items():
            ax.plot(curve.thresholds * 100.0, curve.accuracy, lw=1.5,
                    label=f"{label} (AUC {curve.auc:.3f})")
        ax.set_xlabel("error threshold [cm]")
        ax.set_ylabel("accuracy")
        ax.set_ylim(-0.02, 1.02)
        if title:
            ax.set_title(title)
        if curves:
            ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_weight_traces(traces: dict[str, list[float]], path, threshold: float | None = None,
                       title: str = "") -> Path:
    """Per-iteration population-best weight for each run."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, trace in traces.items():
            ax.plot(range(len(trace)), trace, lw=1.0, label=label)
        if threshold is not None:
            ax.axhline(threshold, color="0.4", ls="--", lw=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("best weight")
        ax.set_ylim(0.0, 1.0)
        if title:
            ax.set_title(title)
        if 0 < len(traces) <= 8:
            ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
