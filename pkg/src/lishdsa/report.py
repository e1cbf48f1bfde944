"""Figure rendering for sensitivity reports.

Each report directory gets three figures next to the CSV/JSON output: the
eigenvalue spectrum with the candidate thresholds, the indices grouped by
parameter block, and the threshold-sweep stability plot.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _style(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.grid(True, alpha=0.3)


def plot_spectrum(eigenvalues, thresholds, path) -> None:
    """Log-scale eigenvalue decay with vertical lines at candidate thresholds."""
    lam = np.asarray(eigenvalues, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    positive = lam[lam > 0]
    ax.semilogy(np.arange(1, positive.size + 1), positive, "o-", ms=3)
    for thr in sorted(set(float(t) for t in thresholds)):
        r_thr = int(np.count_nonzero(lam >= thr))
        if 0 < r_thr <= positive.size:
            ax.axvline(r_thr, color="gray", ls="--", lw=1)
            ax.annotate(
                f"$\\lambda_{{min}}$={thr:g}",
                (r_thr, positive.min()),
                rotation=90,
                fontsize=8,
                va="bottom",
                ha="right",
            )
    ax.set_xlabel("eigenvalue index")
    ax.set_ylabel("generalized eigenvalue")
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_indices(indices, labels, groups, path) -> None:
    """Indices per parameter block, one panel per group."""
    indices = np.asarray(indices, dtype=float)
    groups = list(groups)
    unique = list(dict.fromkeys(groups))
    fig, axes = plt.subplots(
        1, len(unique), figsize=(4 * len(unique), 3.5), squeeze=False
    )
    for ax, grp in zip(axes[0], unique):
        sel = [i for i, g in enumerate(groups) if g == grp]
        vals = indices[sel]
        if len(sel) == 1:
            ax.bar([0], vals)
            ax.set_xticks([0])
            ax.set_xticklabels([labels[sel[0]]], rotation=90, fontsize=7)
        else:
            ax.plot(np.arange(len(sel)), vals, "o-", ms=3)
            ax.set_xlabel("mode within block")
        ax.set_title(grp, fontsize=10)
        ax.set_ylabel("sensitivity index")
        _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_sweep(sweep_entries, path) -> None:
    """Each index as a curve over the informed-subspace dimension r."""
    fig, ax = plt.subplots(figsize=(6, 4))
    entries = sorted(sweep_entries, key=lambda e: e.r)
    rs = [e.r for e in entries]
    if entries:
        block = np.column_stack([np.asarray(e.indices, dtype=float) for e in entries])
        for row in block:
            ax.plot(rs, row, "-", lw=0.8, alpha=0.7)
        for e in entries:
            ax.axvline(e.r, color="gray", ls="--", lw=0.8)
    ax.set_xlabel("informed subspace dimension r")
    ax.set_ylabel("sensitivity index")
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_report_figures(report, out_dir) -> list[Path]:
    """Write spectrum/indices/sweep PNGs into the report directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    thresholds = [e.lambda_min for e in report.sweep] or [report.lambda_min]
    paths = [out / "spectrum.png", out / "indices.png", out / "sweep.png"]
    plot_spectrum(report.eigenvalues, thresholds, paths[0])
    plot_indices(report.indices, report.labels, report.groups, paths[1])
    plot_sweep(report.sweep, paths[2])
    return paths


def plot_field(values, nc, path, title="") -> None:
    """Render a nodal field on the structured (nc+1)^2 mesh as an image."""
    grid = np.asarray(values, dtype=float).reshape(nc + 1, nc + 1)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(grid, origin="lower", extent=(0, 1, 0, 1), cmap="viridis")
    fig.colorbar(im, ax=ax, shrink=0.85)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
