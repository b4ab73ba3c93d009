"""PNG figures for experiment reports. Rendered headless; PNG metadata is stripped so files are reproducible."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from weakseg3d.pipeline import ABLATIONS, ExperimentReport  # noqa: E402

_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_ablation_bars(reports: Sequence[ExperimentReport], path) -> Path:
    """Mean Dice per ablation, grouped by (scheme, ratio), with per-case spread as error bars."""
    groups = sorted({(r.scheme, r.ratio) for r in reports}, key=lambda g: (g[0], -g[1]))
    abls = [a for a in ABLATIONS if any(r.ablation == a for r in reports)]
    cell = {(r.scheme, r.ratio, r.ablation): r for r in reports}
    fig, ax = plt.subplots(figsize=(max(5, 1.8 * len(groups) + 2), 4))
    width = 0.8 / max(1, len(abls))
    x = np.arange(len(groups))
    for i, a in enumerate(abls):
        means = [cell[g + (a,)].mean_dice if g + (a,) in cell else np.nan for g in groups]
        sds = [float(np.std(cell[g + (a,)].dice)) if g + (a,) in cell else 0.0 for g in groups]
        ax.bar(x + (i - (len(abls) - 1) / 2) * width, means, width, yerr=sds, label=a, capsize=2)
    ax.set_xticks(x, [f"{s}\n{100 * r:g}%" for s, r in groups])
    ax.set_ylabel("mean val Dice")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def plot_iteration_curves(reports: Sequence[ExperimentReport], path) -> Path:
    """Validation Dice after each refinement round, starting from the initial SSN."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for r in sorted(reports, key=lambda r: (r.scheme, -r.ratio, r.ablation)):
        if not r.iterations:
            continue
        base = next((b for b in reports if b.ablation == "baseline" and b.scheme == r.scheme and b.ratio == r.ratio), None)
        ys = [it["val_dice_ssn"] for it in r.iterations]
        xs = list(range(1, len(ys) + 1))
        if base is not None:
            xs, ys = [0] + xs, [base.mean_dice] + ys
        ax.plot(xs, ys, marker="o", label=f"{r.ablation} {r.scheme} {100 * r.ratio:g}%")
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean val Dice")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_ratio_trend(reports: Sequence[ExperimentReport], path) -> Path:
    """Mean Dice against the labeled-slice ratio, one line per (ablation, scheme)."""
    fig, ax = plt.subplots(figsize=(5, 4))
    keys = sorted({(r.ablation, r.scheme) for r in reports})
    for a, s in keys:
        pts = sorted((r.ratio, r.mean_dice) for r in reports if r.ablation == a and r.scheme == s)
        ax.plot([100 * p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{a} ({s})")
    ax.set_xlabel("labeled slices (%)")
    ax.set_ylabel("mean val Dice")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
