"""Report figures written next to the run logs and CSV exports."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.frameon": False,
}
# png metadata carries the matplotlib version; drop it so files depend on data only
PNG_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=PNG_META)
    plt.close(fig)
    return path


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(y) < window:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def plot_losses(records: Sequence[dict], path, title: str = "", smooth: int = 10):
    """Generator and discriminator loss components against step."""
    steps = np.array([r["step"] for r in records])
    with plt.rc_context(STYLE):
        fig, (ax_g, ax_d) = plt.subplots(1, 2, sharex=True)
        for ax, keys in (
            (ax_g, ("loss_g_total", "loss_g_adv", "loss_g_dis", "loss_g_reg")),
            (ax_d, ("loss_d_total", "loss_d_adv", "loss_d_dis", "loss_r1")),
        ):
            for key in keys:
                y = np.array([r[key] for r in records], dtype=float)
                if not np.any(y):
                    continue
                ys = _smooth(y, smooth)
                ax.plot(steps[len(steps) - len(ys):], ys, label=key.replace("loss_", ""), lw=1)
            ax.set_xlabel("step")
            ax.legend(fontsize=7)
        ax_g.set_title("generator")
        ax_d.set_title("discriminator")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_fid(reports: Sequence[dict], path, labels: Sequence[str] | None = None):
    """FID per evaluated snapshot; one line per run when ``reports`` is a list of lists."""
    runs = reports if reports and isinstance(reports[0], (list, tuple)) else [reports]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, run in enumerate(runs):
            x = [r["snapshot_step"] for r in run]
            y = [r["score"] for r in run]
            label = labels[i] if labels else None
            ax.plot(x, y, marker="o", ms=3, lw=1, label=label)
        ax.set_xlabel("snapshot step")
        ax.set_ylabel("FID (internal extractor)")
        if labels:
            ax.legend()
        return _save(fig, path)


def plot_inversion_traces(traces: Sequence[np.ndarray], path, segment_ends: Sequence[int] = ()):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for t in traces:
            ax.plot(np.arange(len(t)), t, lw=0.8, alpha=0.7)
        for e in segment_ends[:-1]:
            ax.axvline(e + 0.5, color="0.6", lw=0.6, ls="--")
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("inversion objective")
        return _save(fig, path)


def plot_fid_comparison(scores: dict[str, Sequence[float]], path):
    """Best-FID per seed for each configuration, with the medians marked."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.2))
        for i, (name, vals) in enumerate(scores.items()):
            ax.scatter(np.full(len(vals), i), vals, s=14, alpha=0.8)
            ax.hlines(np.median(vals), i - 0.25, i + 0.25, color="k", lw=1.5)
        ax.set_xticks(range(len(scores)), list(scores))
        ax.set_ylabel("best FID (internal extractor)")
        return _save(fig, path)
