"""Toy overfit training on the objectness loss.

This is the smallest end-to-end exercise of the whole stack: one synthetic
scene, full-batch SGD on the summed per-branch focal losses, and a final
ROC-AUC of the averaged head probabilities against the box-derived labels.
Grid quantization and grouping are parameter-free, so they are computed once
and reused every step; only the differentiable forward is rebuilt.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from fgpfe import nd
from fgpfe.config import RunConfig
from fgpfe.fusion import FullEncoder, align_branches
from fgpfe.gridding import (
    GridSpec,
    KEY_PILLAR,
    KEY_PILLAR_TEMPORAL,
    KEY_PILLAR_VERTICAL,
    KEY_SHIFTED_PILLAR,
    VirtualGridSpec,
    build_grouping,
    content_order,
    quantize,
)
from fgpfe.labels import BRANCHES, ObjectnessHeads, make_labels, objectness_loss
from fgpfe.pcio import Scene


def grid_from_config(cfg: RunConfig) -> GridSpec:
    g = cfg.grid
    return GridSpec(
        x_range=tuple(g.x_range),
        y_range=tuple(g.y_range),
        z_range=tuple(g.z_range),
        cell=tuple(g.cell),
    )


def virtual_from_config(cfg: RunConfig) -> VirtualGridSpec:
    return VirtualGridSpec(
        vertical_bins=cfg.virtual.vertical_bins,
        temporal_bins=cfg.virtual.temporal_bins,
    )


def encoder_from_config(cfg: RunConfig, rng: np.random.Generator) -> FullEncoder:
    return FullEncoder(
        grid_from_config(cfg),
        virtual_from_config(cfg),
        cfg.model.channels,
        rng,
        fused_channels=cfg.model.resolved_fused_channels(),
        reduction=cfg.model.reduction,
        kernel_size=cfg.model.kernel_size,
    )


def heads_from_config(cfg: RunConfig, rng: np.random.Generator) -> ObjectnessHeads:
    return ObjectnessHeads(cfg.model.channels, rng)


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the rank statistic, ties averaged.

    Returns nan when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1) != 0.0
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="mergesort")
    _, inverse, counts = np.unique(scores[order], return_inverse=True, return_counts=True)
    cum = np.cumsum(counts).astype(np.float64)
    avg_rank_per_value = cum - (counts - 1) / 2.0
    ranks = np.empty(scores.size)
    ranks[order] = avg_rank_per_value[inverse]
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    auc: float = float("nan")
    n_cells: int = 0
    n_foreground: int = 0
    steps: int = 0
    lr: float = 0.0

    @property
    def initial_loss(self) -> float:
        return self.losses[0] if self.losses else float("nan")

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def train_toy(
    scene: Scene,
    cfg: RunConfig,
    steps: Optional[int] = None,
    log_every: int = 0,
) -> tuple[FullEncoder, ObjectnessHeads, TrainResult]:
    """Overfit the objectness loss on one scene with full-batch SGD.

    Returns the trained encoder, heads, and the per-step loss history plus
    the final ROC-AUC of the mean head probability.
    """
    steps = cfg.training.steps if steps is None else steps
    lr = cfg.training.lr
    rng = np.random.default_rng(cfg.training.seed)
    encoder = encoder_from_config(cfg, rng)
    heads = heads_from_config(cfg, rng)
    params = list(encoder.parameters()) + list(heads.parameters())

    pts = scene.points
    grid, virtual = encoder.grid, encoder.virtual
    index = quantize(pts, grid, virtual)
    order = content_order(pts, index)
    g_vert = build_grouping(pts, index, KEY_PILLAR_VERTICAL, grid, virtual, order)
    g_temp = build_grouping(pts, index, KEY_PILLAR_TEMPORAL, grid, virtual, order)
    g_base = build_grouping(pts, index, KEY_PILLAR, grid, virtual, order)
    g_shift = build_grouping(pts, index, KEY_SHIFTED_PILLAR, grid, virtual, order)
    if g_base.n_cells == 0:
        raise ValueError("scene has no in-range points to train on")

    def branch_rows():
        v = encoder.vertical.encode(pts, g_vert)
        t = encoder.temporal.encode(pts, g_temp)
        h = encoder.horizontal.encode(pts, g_base, g_shift, pts.shape[0])
        return align_branches([v, t, h])

    coords, _ = branch_rows()
    y = make_labels(coords, grid, scene.boxes)
    result = TrainResult(
        n_cells=len(coords), n_foreground=int(y.sum()), steps=steps, lr=lr
    )

    for step in range(steps):
        _, (va, ta, ha) = branch_rows()
        loss = objectness_loss(
            [va, ta, ha], y, heads,
            balance=cfg.model.loss_balance,
            alpha=cfg.model.alpha,
            gamma=cfg.model.gamma,
        )
        result.losses.append(float(loss.data))
        loss.backward()
        nd.sgd_step(params, lr)
        if log_every and (step % log_every == 0 or step == steps - 1):
            print(f"step {step:4d}  loss {result.losses[-1]:.6f}")

    with nd.no_grad():
        _, (va, ta, ha) = branch_rows()
        probs = [heads.predict(feats, branch).data for feats, branch in
                 zip((va, ta, ha), BRANCHES)]
    result.auc = roc_auc(np.mean(probs, axis=0), y)
    return encoder, heads, result
