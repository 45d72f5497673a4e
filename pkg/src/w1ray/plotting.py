"""PNG rendering for experiment outputs.

Uses the Agg backend and strips the software/date metadata so identical
inputs give identical files. The config hash and seed go into the PNG text
chunks instead.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 80


def _save(fig, path, meta: Optional[Mapping]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    info = {"Software": None}
    if meta:
        info["Comment"] = " ".join(f"{k}={v}" for k, v in meta.items())
    fig.savefig(path, format="png", dpi=DPI, metadata=info)
    plt.close(fig)
    return path


def scatter_stage(path, particles: np.ndarray, atoms: np.ndarray, title: str = "", meta=None, limits=None) -> Path:
    """Particles (small grey dots) against target atoms (red crosses)."""
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(particles[:, 0], particles[:, 1], s=4, c="0.35", linewidths=0)
    ax.scatter(atoms[:, 0], atoms[:, 1], s=40, c="tab:red", marker="x")
    if limits is not None:
        ax.set_xlim(limits[0][0], limits[1][0])
        ax.set_ylim(limits[0][1], limits[1][1])
    ax.set_aspect("equal")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path, meta)


def w1_curve(path, w1_values: Sequence[float], title: str = "W1 per stage", meta=None) -> Path:
    w = np.asarray(w1_values, dtype=float)
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(np.arange(len(w)), w, marker="o", ms=3)
    if np.all(w > 0):
        ax.set_yscale("log")
    ax.set_xlabel("stage")
    ax.set_ylabel("W1")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path, meta)


def image_tiles(path, rows: Sequence[np.ndarray], shape: tuple[int, int], labels: Sequence[str] = (), meta=None) -> Path:
    """Grayscale grid: one row of tiles per array in ``rows``, values clipped to [0, 1] for display."""
    n_rows = len(rows)
    n_cols = max(len(r) for r in rows)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(0.9 * n_cols + 0.6, 0.9 * n_rows), squeeze=False)
    for i, r in enumerate(rows):
        for j in range(n_cols):
            ax = axes[i][j]
            ax.set_xticks([])
            ax.set_yticks([])
            if j < len(r):
                ax.imshow(np.clip(r[j].reshape(shape), 0, 1), cmap="gray", vmin=0, vmax=1, interpolation="nearest")
            else:
                ax.axis("off")
        if i < len(labels):
            axes[i][0].set_ylabel(labels[i], fontsize=7)
    fig.tight_layout()
    return _save(fig, path, meta)
