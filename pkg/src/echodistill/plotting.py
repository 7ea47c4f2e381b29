"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.linewidth": 0.3,
    "grid.color": "0.85",
    "lines.linewidth": 1.2,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    # fixed metadata keeps PNG bytes stable between runs
    "svg.hashsalt": "echodistill",
}


def figure(width=4.0, height=None):
    golden = (math.sqrt(5) - 1.0) / 2.0
    return plt.subplots(figsize=(width, height or width * golden))


def save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_scaling(points, fit, path, title=None, split=None):
    """Log-log view of ``-log(metric)`` against parameter count with the OLS line."""
    with plt.rc_context(STYLE):
        fig, ax = figure()
        n = np.array([p.param_count for p in points], dtype=float)
        y = np.array([p.transformed() for p in points])
        ax.scatter(np.log(n), y, s=14, color="tab:blue", zorder=3, label="models")
        xs = np.linspace(np.log(n).min(), np.log(n).max(), 50)
        ax.plot(xs, fit.intercept + fit.slope * xs, color="tab:red", label=f"slope {fit.slope:.3f}, $r^2$ {fit.r_squared:.3f}")
        if split is not None and split.plateau_region:
            ax.axvline(math.log(split.knee), color="0.4", linestyle="--", linewidth=0.8, label="knee")
        ax.set_xlabel("log(parameters)")
        ax.set_ylabel(f"-log({points[0].metric_kind.value})")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right")
        return save(fig, path)


def plot_afd_vs_fps(bins, slope, path):
    with plt.rc_context(STYLE):
        fig, ax = figure()
        centers = [0.5 * (b.fps_low + b.fps_high) for b in bins]
        ax.bar(centers, [b.mean_abs_error for b in bins], width=8.0, color="tab:blue", alpha=0.7, label="mean |error| per bin")
        if centers:
            xs = np.linspace(0, max(b.fps_high for b in bins), 20)
            ax.plot(xs, slope * xs, color="tab:red", label=f"{slope:.4f} frames per fps")
        ax.set_xlabel("sampling rate (fps)")
        ax.set_ylabel("mean frame error")
        ax.legend(loc="upper left")
        return save(fig, path)


def plot_grid(header, rows, path, title):
    """Heat map of a layers x blocks grid (rows l1..l4, columns B1..B4)."""
    values = np.array([[np.nan if v is None else float(v) for v in row[1:]] for row in rows])
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, ax = figure(3.6, 3.0)
        im = ax.imshow(values, cmap="viridis")
        ax.set_xticks(range(len(header) - 1), header[1:])
        ax.set_yticks(range(len(rows)), [r[0] for r in rows])
        for (i, j), v in np.ndenumerate(values):
            if not np.isnan(v):
                ax.text(j, i, f"{v:.3g}", ha="center", va="center", color="w", fontsize=7)
        fig.colorbar(im, ax=ax, shrink=0.8)
        ax.set_title(title)
        return save(fig, path)


def plot_phase_signal(area, signal, path, events=None, title=None):
    """Mask area and a surrogate phase signal, both z-scored, on one axis."""
    def z(v):
        v = np.asarray(v, dtype=float)
        sd = v.std()
        return (v - v.mean()) / sd if sd > 0 else v - v.mean()

    with plt.rc_context(STYLE):
        fig, ax = figure(5.0, 2.2)
        ax.plot(z(area), color="tab:red", label="mask area")
        ax.plot(z(signal), color="tab:blue", label="prompt signal")
        for name, frame in (events or {}).items():
            ax.axvline(frame, color="0.3", linestyle=":", linewidth=0.8)
            ax.text(frame, ax.get_ylim()[1], name, fontsize=7, ha="center", va="bottom")
        ax.set_xlabel("frame")
        ax.set_ylabel("normalized value")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right")
        return save(fig, path)
