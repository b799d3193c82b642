"""
Report figures rendered straight to image files.

Figures are built on ``matplotlib.figure.Figure`` with the Agg canvas, so
nothing touches pyplot state and the module works without a display.
"""

from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .volume_io import LabelMap, VoxelGrid

# PNG metadata otherwise embeds the matplotlib version
_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def _save(fig: Figure, path) -> None:
    FigureCanvasAgg(fig)
    fig.savefig(path, **_SAVE_KW)


def plot_effort(scans: list, path, summary: dict | None = None) -> None:
    """
    Scatter of correction effort against mean ensemble uncertainty.

    Args:
        scans: records with ``mean_uncertainty`` and ``percentage`` keys.
        path: output image file; the format follows the suffix.
        summary: optional correlation block shown in the title.
    """
    x = np.array([s["mean_uncertainty"] for s in scans])
    y = np.array([s["percentage"] for s in scans])
    fig = Figure(figsize=(5, 4))
    ax = fig.add_subplot()
    ax.scatter(x, y, s=18, color="tab:blue")
    ax.set_xlabel("mean ensemble uncertainty")
    ax.set_ylabel("voxels needing correction (%)")
    if summary and not summary.get("undefined_correlation"):
        ax.set_title(f"Spearman {summary['spearman']:.2f}, Pearson {summary['pearson']:.2f}")
    elif summary:
        ax.set_title("correlation undefined")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_slices(labels: LabelMap, uncertainty: VoxelGrid, path, axis: int = 2,
                index: int | None = None) -> None:
    """Side-by-side fused labels and uncertainty on one slice (middle by default)."""
    if index is None:
        index = labels.dims[axis] // 2
    take = [slice(None)] * 3
    take[axis] = index
    lab = np.asarray(labels.data[tuple(take)]).T
    unc = np.asarray(uncertainty.data[tuple(take)], dtype=float).T
    fig = Figure(figsize=(8, 4))
    ax_l, ax_u = fig.subplots(1, 2)
    ax_l.imshow(np.ma.masked_equal(lab, 0), cmap="tab20", origin="lower",
                interpolation="nearest", vmin=0, vmax=max(labels.num_classes - 1, 1))
    ax_l.set_title("fused labels")
    im = ax_u.imshow(unc, cmap="magma", origin="lower", interpolation="nearest",
                     vmin=0, vmax=max(float(unc.max()), 1e-12))
    ax_u.set_title("uncertainty")
    fig.colorbar(im, ax=ax_u, fraction=0.046)
    for ax in (ax_l, ax_u):
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    _save(fig, path)


def plot_groups(groups: dict, path) -> None:
    """Median DSC per label group with the 16th to 84th percentile band."""
    names = [n for n, g in groups.items() if g is not None and g.defined]
    fig = Figure(figsize=(max(4, 0.8 * len(names) + 2), 4))
    ax = fig.add_subplot()
    if names:
        med = np.array([groups[n].median for n in names])
        lo = med - np.array([groups[n].p16 for n in names])
        hi = np.array([groups[n].p84 for n in names]) - med
        pos = np.arange(len(names))
        ax.errorbar(pos, med, yerr=np.vstack([lo, hi]), fmt="o", capsize=4)
        ax.set_xticks(pos, names, rotation=30, ha="right")
        for p, n in zip(pos, names):
            dr = groups[n].detection_ratio
            if dr < 1:
                ax.annotate(f"{100 * dr:.0f}%", (p, med[p]),
                            textcoords="offset points", xytext=(6, -3), fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("DSC")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_ranking(records: list, path) -> None:
    """Bar chart of scan uncertainty in rank order; selected scans are filled."""
    fig = Figure(figsize=(max(4, 0.4 * len(records) + 2), 4))
    ax = fig.add_subplot()
    pos = np.arange(len(records))
    colors = ["tab:green" if r["selected"] else "lightgray" for r in records]
    ax.bar(pos, [r["mean_uncertainty"] for r in records], color=colors)
    ax.set_xticks(pos, [r["scan_id"] for r in records], rotation=45, ha="right")
    ax.set_ylabel("mean ensemble uncertainty")
    fig.tight_layout()
    _save(fig, path)
