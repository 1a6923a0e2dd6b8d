"""Figures written next to the CSV reports.

Everything renders through the Agg backend; SVG output has its date stamp
and id salt pinned so reruns produce the same bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

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
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "geoproto",
    "svg.fonttype": "none",
}

FAMILY_COLORS = {
    "compact_ellipse": "#4C72B0",
    "annulus": "#DD8452",
    "irregular_blob": "#55A868",
}


def _save(fig, path) -> Path:
    path = Path(path)
    meta = {"Date": None} if path.suffix == ".svg" else {}
    fig.savefig(path, bbox_inches="tight", metadata=meta)
    plt.close(fig)
    return path


def bin_histograms(hists: Mapping[str, np.ndarray], path) -> Path:
    """One bar chart panel per shape family of the mean bin distribution."""
    with plt.rc_context(STYLE):
        n = len(hists)
        fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.2), sharey=True, squeeze=False)
        for ax, (name, h) in zip(axes[0], hists.items()):
            K = len(h)
            ax.bar(np.arange(K), h, color=FAMILY_COLORS.get(name, "0.4"), width=0.8)
            ax.set_title(name)
            ax.set_xlabel("bin")
            ax.set_xticks(np.arange(K))
        axes[0][0].set_ylabel("fraction of foreground")
        fig.tight_layout()
        return _save(fig, path)


def bc_distributions(bcs: Mapping[str, Sequence[float]], path) -> Path:
    """Box plot of support-query Bhattacharyya coefficients per family."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(bcs), 2.4))
        names = list(bcs)
        box = ax.boxplot([np.asarray(bcs[k]) for k in names], patch_artist=True, widths=0.6,
                         showfliers=False)
        for patch, name in zip(box["boxes"], names):
            patch.set_facecolor(FAMILY_COLORS.get(name, "0.7"))
        ax.set_xticks(range(1, len(names) + 1), names, rotation=20)
        ax.set_ylabel("BC (support vs query)")
        fig.tight_layout()
        return _save(fig, path)


def training_curves(log_rows: Sequence[dict], heldout_rows: Sequence[dict], path,
                    smooth: int = 50) -> Path:
    """Running-mean loss components and held-out bin MAE over training."""
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.0, 2.5))
        if log_rows:
            ep = np.array([r["episode"] for r in log_rows])
            for key in ("L_seg", "L_align", "L_OSB"):
                y = np.array([r[key] for r in log_rows], dtype=float)
                k = max(1, min(smooth, len(y)))
                ys = np.convolve(y, np.ones(k) / k, mode="valid")
                ax1.plot(ep[k - 1:], ys, label=key, lw=1.2)
            ax1.legend(frameon=False)
        ax1.set_xlabel("episode")
        ax1.set_ylabel("loss")
        if heldout_rows:
            he = [r["episode"] for r in heldout_rows]
            ax2.plot(he, [r["bin_mae"] for r in heldout_rows], "o-", color="#C44E52", lw=1.2)
        ax2.set_xlabel("episode")
        ax2.set_ylabel("held-out bin MAE")
        fig.tight_layout()
        return _save(fig, path)


def ablation_bars(rows: Sequence[dict], path, metric: str = "mean_dsc") -> Path:
    """Horizontal bars of mean DSC per ablation cell, with paired deltas annotated."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 0.45 * len(rows) + 0.8))
        names = [r["cell"] for r in rows]
        vals = [float(r[metric]) * 100.0 for r in rows]
        y = np.arange(len(rows))[::-1]
        ax.barh(y, vals, color="#4C72B0", height=0.6)
        for yi, r, v in zip(y, rows, vals):
            d = r.get("delta_dsc")
            if d not in (None, "") and not np.isnan(float(d)):
                ax.text(v + 0.5, yi, f"{float(d) * 100:+.2f}", va="center", fontsize=7)
        ax.set_yticks(y, names)
        ax.set_xlabel("mean DSC (%)")
        lo = max(0.0, min(vals) - 10.0) if vals else 0.0
        ax.set_xlim(lo, 100.0)
        fig.tight_layout()
        return _save(fig, path)
