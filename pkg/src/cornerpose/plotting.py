"""Report figures. Everything renders off-screen to PNG files."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden_mean = (math.sqrt(5) - 1.0) / 2.0
fig_width = 4.5
colors = ["#08589e", "#2b8cbe", "#4eb3d3", "#7bccc4", "#a8ddb5"]

params = {
    "axes.prop_cycle": matplotlib.cycler(color=colors),
    "axes.labelsize": 9,
    "font.size": 8,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": [fig_width, fig_width * golden_mean],
    "figure.dpi": 150,
    "lines.linewidth": 1.2,
    "svg.hashsalt": "cornerpose",
}

# no timestamps or version strings, so reruns give identical bytes
_PNG_META = {"Software": None}


def _new(**kw):
    with plt.rc_context(params):
        fig, ax = plt.subplots(**kw)
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    with plt.rc_context(params):
        fig.tight_layout()
        fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def loss_curve(rows, path) -> Path:
    """rows: iterable of (step, lr, coarse, fine, total)."""
    rows = np.asarray(list(rows), dtype=float).reshape(-1, 5)
    with plt.rc_context(params):
        fig, ax = _new()
        if len(rows):
            ax.semilogy(rows[:, 0], rows[:, 2], label="coarse")
            ax.semilogy(rows[:, 0], np.maximum(rows[:, 3], 1e-12), label="fine")
            ax.semilogy(rows[:, 0], rows[:, 4], label="total", color="k", lw=0.8)
            ax.legend(frameon=False)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        return _save(fig, path)


def accuracy_curves(errors: dict[str, list[float]], max_threshold: float, path, unit: str = "m") -> Path:
    """Accuracy-vs-threshold curves, one per error list, AUC in the legend."""
    from .eval import auc

    ts = np.linspace(0.0, max_threshold, 201)
    with plt.rc_context(params):
        fig, ax = _new()
        for name, errs in errors.items():
            e = np.sort(np.asarray(errs, dtype=float))
            if e.size == 0:
                continue
            acc = np.searchsorted(e, ts, side="right") / e.size
            ax.plot(ts, acc, label=f"{name} (AUC {auc(e, max_threshold):.3f})")
        ax.set_xlim(0, max_threshold)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel(f"threshold [{unit}]")
        ax.set_ylabel("accuracy")
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)


def corner_error_histogram(errors, path, bins: int = 30) -> Path:
    e = np.asarray(errors, dtype=float)
    e = e[np.isfinite(e)]
    with plt.rc_context(params):
        fig, ax = _new()
        if e.size:
            ax.hist(e, bins=bins, color=colors[1])
            ax.axvline(np.median(e), color="k", lw=0.8, ls="--", label=f"median {np.median(e):.2f} px")
            ax.legend(frameon=False)
        ax.set_xlabel("median corner error per scene [px]")
        ax.set_ylabel("scenes")
        return _save(fig, path)


def metric_bars(results: dict[str, dict[str, float]], keys, path) -> Path:
    """Grouped bars comparing aggregate metrics across runs (e.g. clean vs occluded)."""
    keys = list(keys)
    with plt.rc_context(params):
        fig, ax = _new()
        width = 0.8 / max(len(results), 1)
        x = np.arange(len(keys))
        for i, (name, agg) in enumerate(results.items()):
            ax.bar(x + i * width, [agg.get(k, 0.0) for k in keys], width, label=name)
        ax.set_xticks(x + width * (len(results) - 1) / 2)
        ax.set_xticklabels(keys)
        ax.set_ylim(0, 1)
        ax.legend(frameon=False)
        return _save(fig, path)
