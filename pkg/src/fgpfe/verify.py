"""Finite-difference verification of every layer and encoder graph.

The suite runs at deliberately small sizes — 8 channels, 4 vertical and 4
temporal bins, a coarse grid keeping the scene at or below 32 pillars — so a
full pass of central differences over subsampled parameter coordinates
finishes in seconds while still executing every backward rule the package
ships: the layer primitives, all three branch encoders, the fusion gate, the
objectness loss, and the complete pipeline graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from fgpfe import nd
from fgpfe.config import RunConfig
from fgpfe.fusion import AttentiveFusion, FullEncoder, align_branches
from fgpfe.gridding import GridSpec, VirtualGridSpec
from fgpfe.labels import ObjectnessHeads, make_labels, objectness_loss
from fgpfe.pcio import gen_scene

#: verification sizes; chosen so the whole suite runs in well under a minute
CHECK_CHANNELS = 8
CHECK_VERTICAL_BINS = 4
CHECK_TEMPORAL_BINS = 4
CHECK_MAX_PILLARS = 32
#: coordinates sampled per graph (fd_check subsamples above this)
CHECK_COORDS = 160


@dataclass
class VerificationResult:
    """Named per-graph gradient-check reports plus the overall verdict."""

    reports: list = field(default_factory=list)  # (name, GradCheckReport)

    @property
    def passed(self) -> bool:
        return all(report.passed for _, report in self.reports)

    @property
    def max_rel_error(self) -> float:
        return max((report.max_rel_error for _, report in self.reports), default=0.0)

    def table(self) -> str:
        width = max((len(name) for name, _ in self.reports), default=4)
        lines = []
        for name, report in self.reports:
            lines.append(f"{name:<{width}}  {report}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{'overall':<{width}}  {verdict}: max relative error "
                     f"{self.max_rel_error:.3e}")
        return "\n".join(lines)


def _check_scene(seed: int):
    """A tiny scene and coarse grid with at most CHECK_MAX_PILLARS pillars."""
    grid = GridSpec(cell=(18.0, 18.0))  # 6 x 6 pillars over the default range
    virtual = VirtualGridSpec(
        vertical_bins=CHECK_VERTICAL_BINS, temporal_bins=CHECK_TEMPORAL_BINS
    )
    scene = gen_scene(seed, n_boxes=2, points_per_box=40,
                      background_points=60, sweeps=3)
    return scene, grid, virtual


def check_gradients(
    cfg: Optional[RunConfig] = None,
    seed: int = 0,
    step: float = 1e-5,
    tolerance: float = 1e-5,
    progress: Optional[Callable[[str], None]] = None,
) -> VerificationResult:
    """Run fd_check over every layer and encoder graph at the pinned sizes.

    ``cfg`` contributes only the loss shape (alpha, gamma, balance); the
    tensor dimensions stay at the small verification sizes regardless, so a
    production-sized config cannot blow the runtime budget.
    """
    cfg = cfg if cfg is not None else RunConfig()
    rng = np.random.default_rng(seed)
    scene, grid, virtual = _check_scene(seed)
    pts = scene.points

    encoder = FullEncoder(grid, virtual, channels=CHECK_CHANNELS, rng=rng)
    heads = ObjectnessHeads(CHECK_CHANNELS, rng)
    result = VerificationResult()

    def run(name: str, loss_fn, params) -> None:
        report = nd.fd_check(loss_fn, params, step=step, tolerance=tolerance,
                             max_coords=CHECK_COORDS, seed=seed)
        result.reports.append((name, report))
        if progress is not None:
            progress(f"{name}: {report}")

    def weighted(out: nd.Tensor, key: int) -> nd.Tensor:
        """Scalar readout with fixed random weights (breaks row symmetry)."""
        w = np.random.default_rng(key).normal(size=out.data.shape)
        return nd.mean_all(nd.mul(out, w))

    # --- layer primitives ---
    x_lin = nd.Tensor(rng.normal(size=(7, 5)))
    linear = nd.Linear(5, 3, rng, name="check.linear")
    run("linear", lambda: weighted(linear(x_lin), 11), linear.parameters())

    mlp = nd.Mlp(5, 3, rng, name="check.mlp")
    run("mlp", lambda: weighted(mlp(x_lin), 12), mlp.parameters())

    x_conv = nd.Tensor(rng.normal(size=(4, 6, 2)))
    conv = nd.Conv1d(2, 2, kernel_size=3, rng=rng, bias=True, name="check.conv")
    run("conv1d", lambda: weighted(conv(x_conv), 13), conv.parameters())

    # --- branch encoders on the shared tiny scene ---
    from fgpfe.gridding import (
        KEY_PILLAR, KEY_PILLAR_TEMPORAL, KEY_PILLAR_VERTICAL,
        KEY_SHIFTED_PILLAR, build_grouping, content_order, quantize,
    )

    index = quantize(pts, grid, virtual)
    order = content_order(pts, index)
    g_vert = build_grouping(pts, index, KEY_PILLAR_VERTICAL, grid, virtual, order)
    g_temp = build_grouping(pts, index, KEY_PILLAR_TEMPORAL, grid, virtual, order)
    g_base = build_grouping(pts, index, KEY_PILLAR, grid, virtual, order)
    g_shift = build_grouping(pts, index, KEY_SHIFTED_PILLAR, grid, virtual, order)
    if g_base.n_cells > CHECK_MAX_PILLARS:
        raise ValueError(
            f"verification scene has {g_base.n_cells} pillars, "
            f"expected <= {CHECK_MAX_PILLARS}"
        )

    run("vertical-encoder",
        lambda: weighted(encoder.vertical.encode(pts, g_vert).feats, 21),
        encoder.vertical.parameters())
    run("temporal-encoder",
        lambda: weighted(encoder.temporal.encode(pts, g_temp).feats, 22),
        encoder.temporal.parameters())
    run("horizontal-encoder",
        lambda: weighted(
            encoder.horizontal.encode(pts, g_base, g_shift, pts.shape[0]).feats, 23
        ),
        encoder.horizontal.parameters())

    # --- fusion gate on fixed branch rows ---
    frows = [nd.Tensor(rng.normal(size=(9, CHECK_CHANNELS))) for _ in range(3)]
    fusion = AttentiveFusion(CHECK_CHANNELS, rng)
    run("fusion", lambda: weighted(fusion(*frows), 24), fusion.parameters())

    # --- objectness loss through the heads ---
    y_rows = (rng.random(9) < 0.4).astype(np.float64)
    run("objectness-loss",
        lambda: objectness_loss(frows, y_rows, heads,
                                balance=cfg.model.loss_balance,
                                alpha=cfg.model.alpha, gamma=cfg.model.gamma),
        heads.parameters())

    # --- the full pipeline graph: every encoder + fusion + loss ---
    def full_loss() -> nd.Tensor:
        coords, aligned = align_branches([
            encoder.vertical.encode(pts, g_vert),
            encoder.temporal.encode(pts, g_temp),
            encoder.horizontal.encode(pts, g_base, g_shift, pts.shape[0]),
        ])
        fused = encoder.fusion(*aligned)
        labels = make_labels(coords, grid, scene.boxes)
        per_cell = nd.add(
            objectness_loss(aligned, labels, heads,
                            balance=cfg.model.loss_balance,
                            alpha=cfg.model.alpha, gamma=cfg.model.gamma),
            weighted(fused, 25),
        )
        return per_cell

    run("full-pipeline", full_loss, encoder.parameters() + heads.parameters())
    return result
