"""PNG figures for the report path (matplotlib, headless Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pipelines import LV_VOLUME, RV_VOLUME  # noqa: E402

VIEWS = ("axial", "coronal", "sagittal")


def mid_slices(vol: np.ndarray) -> dict[str, np.ndarray]:
    """Central slices of an ``[x, y, z]`` volume, oriented for ``imshow``."""
    x, y, z = (n // 2 for n in vol.shape)
    return {"axial": vol[:, :, z].T, "coronal": vol[:, y, :].T, "sagittal": vol[x, :, :].T}


def heatmap_figure(values: np.ndarray, path, mask: np.ndarray | None = None, title: str = "",
                   signed: bool = True) -> Path:
    """Three orthogonal mid-plane slices of a heatmap or heatmap difference.

    Masked cells are left blank. Signed maps use a symmetric diverging scale.
    """
    vol = np.array(values, dtype=float)
    if mask is not None:
        vol[np.asarray(mask, bool)] = np.nan
    lim = float(np.nanmax(np.abs(vol))) if np.isfinite(vol).any() else 1.0
    lim = lim or 1.0
    cmap, vmin, vmax = ("RdBu_r", -lim, lim) if signed else ("viridis", 0.0, max(lim, 1e-12))
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.4))
    for ax, (name, sl) in zip(axes, mid_slices(vol).items()):
        im = ax.imshow(sl, origin="lower", cmap=cmap, vmin=vmin, vmax=vmax)
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes, shrink=0.8)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def volume_scatter(reference: np.ndarray, cohorts: Mapping[str, np.ndarray], path,
                   title: str = "", seed: np.ndarray | None = None) -> Path:
    """LV vs RV volume of the reference cloud with one or more overlaid cohorts."""
    fig, ax = plt.subplots(figsize=(5, 4.5))
    ax.scatter(reference[:, LV_VOLUME], reference[:, RV_VOLUME], s=10, c="0.7", label="reference")
    for name, feats in cohorts.items():
        f = np.atleast_2d(feats)
        ax.scatter(f[:, LV_VOLUME], f[:, RV_VOLUME], s=12, alpha=0.8, label=name)
    if seed is not None:
        ax.scatter([seed[LV_VOLUME]], [seed[RV_VOLUME]], marker="*", s=160, c="k", label="seed")
    ax.set_xlabel("LV volume (ml)")
    ax.set_ylabel("RV volume (ml)")
    ax.legend(fontsize=7)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def sensitivity_figure(rows: Sequence[dict], path) -> Path:
    """FD, precision, recall and violation rate against steps and cohort size."""
    metrics = ("fd", "precision", "recall", "violation_rate")
    sweeps = [s for s in ("steps", "size") if any(r["sweep"] == s for r in rows)]
    fig, axes = plt.subplots(len(sweeps), len(metrics), figsize=(12, 3 * len(sweeps)), squeeze=False)
    for i, sw in enumerate(sweeps):
        sub = sorted((r for r in rows if r["sweep"] == sw), key=lambda r: r[sw])
        xs = [r[sw] for r in sub]
        for j, m in enumerate(metrics):
            ys = [np.nan if r[m] is None else r[m] for r in sub]
            ax = axes[i][j]
            ax.plot(xs, ys, marker="o")
            ax.set_xscale("log")
            ax.set_xlabel(sw)
            ax.set_title(m)
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=90, metadata={"Software": None})
    plt.close(fig)
    return path
