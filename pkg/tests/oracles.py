"""Independent reference implementations used as test oracles.

Everything here is written from scratch against the documented contracts —
plain Python loops, dicts, and straight-line numpy, sharing no helpers with
the package — so agreement between an oracle and the production path is
evidence, not tautology.
"""

from __future__ import annotations

import math

import numpy as np

# the sweep-time window every admitted point falls in, [0, WINDOW) seconds
WINDOW = 0.5


# ---------------------------------------------------------------------------
# brute-force grouping / pooling


def _axis_cell(coord: float, lo: float, offset: float, step: float, n: int) -> int:
    """floor((coord - lo - offset) / step) clipped into [0, n)."""
    idx = math.floor((coord - lo - offset) / step)
    return min(max(idx, 0), n - 1)


def _cells_of(grid) -> tuple[int, int]:
    n_x = int(round((grid.x_range[1] - grid.x_range[0]) / grid.cell[0]))
    n_y = int(round((grid.y_range[1] - grid.y_range[0]) / grid.cell[1]))
    return n_x, n_y


def reference_group_pool(points, key, grid, virtual, pool="mean"):
    """Hash-map grouper over the raw 5-column features, O(N * cells) honest.

    Returns a dict with ``coords`` ([G, 2] canonically sorted), ``n_cells``,
    and either ``feats`` [G, 5] (single-bin keys) or dense ``feats``
    [G, bins, 5] plus ``mask`` [G, bins] (virtual-bin keys).  Mean pooling
    sums each group's members one at a time in content-sorted order, the
    same accumulation contract the production grouper promises.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 5)
    n_x, n_y = _cells_of(grid)
    dx, dy = grid.cell
    ox, oy = grid.offset
    z_step = (grid.z_range[1] - grid.z_range[0]) / virtual.vertical_bins
    t_step = WINDOW / virtual.temporal_bins

    if key == "pillar-vertical":
        bins = virtual.vertical_bins
    elif key == "pillar-temporal":
        bins = virtual.temporal_bins
    elif key in ("pillar", "shifted-pillar"):
        bins = 1
    else:
        raise ValueError(f"unknown key {key!r}")

    groups: dict[tuple, list] = {}
    for row in pts:
        x, y, z, _, dt = (float(v) for v in row)
        if not (grid.x_range[0] <= x < grid.x_range[1]):
            continue
        if not (grid.y_range[0] <= y < grid.y_range[1]):
            continue
        if not (grid.z_range[0] <= z < grid.z_range[1]):
            continue
        if not (0.0 <= dt < WINDOW):
            continue
        if key == "shifted-pillar":
            cell = (
                _axis_cell(x, grid.x_range[0], ox + 0.5 * dx, dx, n_x),
                _axis_cell(y, grid.y_range[0], oy + 0.5 * dy, dy, n_y),
            )
        else:
            cell = (
                _axis_cell(x, grid.x_range[0], ox, dx, n_x),
                _axis_cell(y, grid.y_range[0], oy, dy, n_y),
            )
        if key == "pillar-vertical":
            b = _axis_cell(z, grid.z_range[0], 0.0, z_step, virtual.vertical_bins)
        elif key == "pillar-temporal":
            b = _axis_cell(dt, 0.0, 0.0, t_step, virtual.temporal_bins)
        else:
            b = 0
        groups.setdefault((cell, b), []).append(row)

    def pooled(members: list) -> np.ndarray:
        ordered = sorted(members, key=lambda r: tuple(r))
        if pool == "max":
            out = np.array(ordered[0], dtype=np.float64)
            for row in ordered[1:]:
                out = np.maximum(out, row)
            return out
        acc = np.zeros(5)
        for row in ordered:
            acc += row
        return acc / len(ordered)

    cells = sorted({cell for cell, _ in groups})
    coords = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    if bins == 1:
        feats = np.zeros((len(cells), 5))
        for g, cell in enumerate(cells):
            feats[g] = pooled(groups[(cell, 0)])
        return {"coords": coords, "feats": feats, "n_cells": len(cells)}

    row_of = {cell: g for g, cell in enumerate(cells)}
    dense = np.zeros((len(cells), bins, 5))
    mask = np.zeros((len(cells), bins), dtype=bool)
    for (cell, b), members in groups.items():
        g = row_of[cell]
        dense[g, b] = pooled(members)
        mask[g, b] = True
    return {"coords": coords, "feats": dense, "mask": mask, "n_cells": len(cells)}


# ---------------------------------------------------------------------------
# straight-line vertical attention collapse


def vertical_collapse_reference(
    pooled: np.ndarray,
    mask: np.ndarray,
    w_reduce: np.ndarray,
    w_expand: np.ndarray,
    conv_kernel: np.ndarray,
    out_weight: np.ndarray,
    out_bias: np.ndarray,
    apply_relu: bool = True,
) -> np.ndarray:
    """The vertical-axis collapse written as one pass of plain numpy.

    ``pooled`` is the dense [cells, bins, C] block (zeros at unoccupied
    bins), ``mask`` its [cells, bins] occupancy.  Weight arguments are the
    raw parameter arrays: the channel bottleneck pair, the [1, 2, K] conv
    filter over (avg, max) bin statistics, and the final [C, bins*C] map.
    """
    p = np.asarray(pooled, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    n, bins, c = p.shape

    # channel gate from vertical-axis statistics through the shared bottleneck
    def bottleneck(v):
        return np.maximum(v @ w_reduce.T, 0.0) @ w_expand.T

    squeeze = bottleneck(p.mean(axis=1)) + bottleneck(p.max(axis=1))
    chan_gate = 1.0 / (1.0 + np.exp(-squeeze))
    gated = p * chan_gate[:, None, :]

    # bin gate: conv over the bin axis of per-bin channel statistics
    stats = np.stack([gated.mean(axis=2), gated.max(axis=2)], axis=2)  # [n, bins, 2]
    k = conv_kernel.shape[-1]
    pad = (k - 1) // 2
    padded = np.pad(stats, ((0, 0), (pad, pad), (0, 0)))
    response = np.zeros((n, bins))
    for b in range(bins):
        window = padded[:, b : b + k, :]  # [n, k, 2]
        response[:, b] = np.einsum("nkc,ck->n", window, conv_kernel[0])
    bin_gate = 1.0 / (1.0 + np.exp(-response))
    attended = gated * bin_gate[:, :, None]

    # unoccupied bins carry exact zeros into the flatten
    attended = attended * m[:, :, None]
    out = attended.reshape(n, bins * c) @ out_weight.T + out_bias
    return np.maximum(out, 0.0) if apply_relu else out


# ---------------------------------------------------------------------------
# brute-force label rasterization


def _footprint_corners(box) -> list[tuple[float, float]]:
    """The box's BEV corners, counter-clockwise."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    corners = []
    for hx, hy in ((+0.5, +0.5), (-0.5, +0.5), (-0.5, -0.5), (+0.5, -0.5)):
        lx, ly = hx * box.l, hy * box.w
        corners.append((box.cx + c * lx - s * ly, box.cy + s * lx + c * ly))
    return corners


def _inside_footprint(px: float, py: float, box) -> bool:
    """Boundary-inclusive point-in-rectangle via edge cross products."""
    corners = _footprint_corners(box)
    for i in range(4):
        ax, ay = corners[i]
        bx, by = corners[(i + 1) % 4]
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        if cross < 0.0:
            return False
    return True


def rasterize_labels_reference(coords, grid, boxes) -> np.ndarray:
    """Per-cell loop over every box: 1 when the cell center is covered."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    out = np.zeros(len(coords))
    for i, (ix, iy) in enumerate(coords):
        px = grid.x_range[0] + grid.offset[0] + (ix + 0.5) * grid.cell[0]
        py = grid.y_range[0] + grid.offset[1] + (iy + 0.5) * grid.cell[1]
        if any(_inside_footprint(px, py, box) for box in boxes):
            out[i] = 1.0
    return out
