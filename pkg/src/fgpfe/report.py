"""Figure rendering for the CLI: loss curves, bench charts, BEV previews.

Every function renders one PNG next to the command's structured output.
matplotlib is imported lazily with the Agg backend so headless runs work and
importing :mod:`fgpfe` never drags the plotting stack in.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from fgpfe import nd
from fgpfe.bench import BenchReport
from fgpfe.pcio import Scene


def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    return plt


def save_loss_curve(losses, path, title: str = "training loss") -> Path:
    """Line plot of per-step loss, log-scaled when it spans decades."""
    losses = np.asarray(losses, dtype=np.float64).reshape(-1)
    path = Path(path)
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(np.arange(losses.size), losses, lw=1.2)
    positive = losses[losses > 0]
    if positive.size and positive.max() / positive.min() > 50.0:
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_bench_chart(report: BenchReport, path) -> Path:
    """Horizontal bar chart of mean stage times with min/max whiskers."""
    path = Path(path)
    stages = list(report.stage_times)
    means = np.array([report.stage_mean(s) * 1e3 for s in stages])
    lo = np.array([min(report.stage_times[s]) * 1e3 for s in stages])
    hi = np.array([max(report.stage_times[s]) * 1e3 for s in stages])
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7.2, 0.5 * len(stages) + 1.6))
    ypos = np.arange(len(stages))[::-1]
    ax.barh(ypos, means, xerr=(means - lo, hi - means), color="#4878b0",
            error_kw={"ecolor": "#333333", "lw": 1.0})
    for y, mean in zip(ypos, means):
        ax.text(mean, y, f" {mean:.0f} ms", va="center", fontsize=8)
    ax.set_yticks(ypos)
    ax.set_yticklabels(stages)
    ax.set_xlabel("mean stage time (ms)")
    ax.set_title(
        f"{report.n_points:,} points, {report.channels} channels, "
        f"{report.repeats} repeats — total {report.total_seconds * 1e3:.0f} ms"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_bev_preview(bev, path, title: str = "BEV feature magnitude") -> Path:
    """Per-cell feature L2 norm of a dense [n_y, n_x, C] map as an image."""
    data = bev.data if isinstance(bev, nd.Tensor) else np.asarray(bev)
    if data.ndim != 3:
        raise ValueError(f"BEV map must be [n_y, n_x, C], got shape {data.shape}")
    magnitude = np.sqrt((data * data).sum(axis=2))
    path = Path(path)
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.0, 5.4))
    im = ax.imshow(magnitude, origin="lower", cmap="magma", interpolation="nearest")
    fig.colorbar(im, ax=ax, shrink=0.85, label="|feature|")
    ax.set_xlabel("x cell")
    ax.set_ylabel("y cell")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_scene_preview(scene: Scene, path, max_points: int = 60_000) -> Path:
    """Top-down scatter of the scene colored by reflectance, boxes outlined."""
    path = Path(path)
    pts = scene.points
    if pts.shape[0] > max_points:
        step = pts.shape[0] // max_points + 1
        pts = pts[::step]
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.0, 5.4))
    if pts.size:
        sc = ax.scatter(pts[:, 0], pts[:, 1], c=pts[:, 3], s=1.0, cmap="viridis",
                        linewidths=0, rasterized=True)
        fig.colorbar(sc, ax=ax, shrink=0.85, label="reflectance")
    for box in scene.boxes:
        corners = box.corners_bev()
        ring = np.vstack([corners, corners[:1]])
        ax.plot(ring[:, 0], ring[:, 1], color="#d62728", lw=1.0)
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_title(f"{scene.n_points:,} points, {len(scene.boxes)} boxes")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
