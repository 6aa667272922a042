"""The three pillar feature encoders over the vertical, temporal, and
shifted-horizontal virtual grids.

Each encoder lifts augmented per-point features to ``channels`` with a small
shared MLP, pools them into its grid's cells, and collapses the virtual-bin
axis back to ``channels`` so all three branches emit identically shaped
per-pillar rows:

* ``VerticalEncoder`` — mean-pools per (pillar, vertical bin), then collapses
  the vertical axis with a two-stage attention (channel gate from avg/max
  vertical statistics, vertical gate from a 1-D conv over channel
  statistics) before the reshape + MLP.
* ``TemporalEncoder`` — mean-pools per (pillar, sweep-time bin) and collapses
  by plain reshape + MLP.
* ``HorizontalEncoder`` — max-pools per cell on the base grid and on the
  half-cell-shifted grid, gives every point the concatenation of its two
  cell features, reduces back to ``channels``, and max-pools into base cells.

All forward passes run in the canonical point order fixed by ``gridding``,
which is what makes encoded features reproducible bit-for-bit under input
permutations.
"""

from __future__ import annotations

import numpy as np

from fgpfe import nd
from fgpfe.gridding import Grouping, SparseFeatureSet
from fgpfe.nd.ops import sequential_segment_sum

#: (x, y, z, r, dt, offsets to the group's centroid, offsets to the cell center)
AUGMENT_DIM = 10


def augment_points(ordered_points: np.ndarray, grouping: Grouping) -> np.ndarray:
    """Build the 10-wide per-point feature block, [M, 10].

    Columns: the raw five point fields, the offset to the containing group's
    point centroid (x, y, z), and the offset to the cell center (x, y) — all
    in physical units, the usual pillar-network point decoration.  Centroids
    accumulate in canonical order, keeping the block permutation-stable
    bit-for-bit.
    """
    pts = np.asarray(ordered_points, dtype=np.float64).reshape(-1, 5)
    if pts.shape[0] != grouping.n_points:
        raise ValueError(
            f"expected the grouping's {grouping.n_points} ordered points, got {pts.shape[0]}"
        )
    out = np.empty((pts.shape[0], AUGMENT_DIM))
    out[:, :5] = pts
    if pts.shape[0]:
        sums = sequential_segment_sum(pts[:, :3], grouping.starts, grouping.counts)
        centroid = (sums / grouping.counts.reshape(-1, 1))[grouping.point_segment()]
        centers = grouping.grid.cell_centers(grouping.coords)[grouping.point_row()]
        out[:, 5:8] = pts[:, :3] - centroid
        out[:, 8:10] = pts[:, :2] - centers
    return out


def _lift_ordered(points: np.ndarray, grouping: Grouping, lift: nd.Mlp) -> nd.Tensor:
    """Augment the grouping's points (canonical order) and lift to channels."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 5)
    aug = augment_points(pts[grouping.point_order], grouping)
    return lift(nd.Tensor(aug))


def _dense_bins(pooled: nd.Tensor, grouping: Grouping) -> tuple[nd.Tensor, np.ndarray]:
    """Spread [S, C] segment features into dense [G, bins, C] plus a mask."""
    channels = pooled.data.shape[1]
    flat = grouping.segment_row * np.int64(grouping.bins) + grouping.segment_bin
    dense = nd.scatter_rows(pooled, flat, grouping.n_cells * grouping.bins)
    dense = nd.reshape(dense, (grouping.n_cells, grouping.bins, channels))
    mask = np.zeros((grouping.n_cells, grouping.bins), dtype=bool)
    mask[grouping.segment_row, grouping.segment_bin] = True
    return dense, mask


class VerticalEncoder(nd.Module):
    """Per-pillar vertical-bin features collapsed through two-stage attention."""

    def __init__(
        self,
        channels: int,
        vertical_bins: int,
        rng: np.random.Generator,
        reduction: int = 4,
        kernel_size: int = 7,
    ):
        if channels % reduction:
            raise ValueError(f"reduction {reduction} must divide channels {channels}")
        self.channels = channels
        self.vertical_bins = vertical_bins
        self.lift = nd.Mlp(AUGMENT_DIM, channels, rng, name="vertical.lift")
        # channel gate: shared two-layer bottleneck, no biases
        self.gate_reduce = nd.Linear(
            channels, channels // reduction, rng, bias=False, name="vertical.gate_reduce"
        )
        self.gate_expand = nd.Linear(
            channels // reduction, channels, rng, bias=False, name="vertical.gate_expand"
        )
        # vertical gate: conv over the bin axis of (avg, max) channel statistics
        self.depth_conv = nd.Conv1d(2, 1, kernel_size, rng, bias=False, name="vertical.depth_conv")
        self.out = nd.Mlp(vertical_bins * channels, channels, rng, name="vertical.out")

    def pooled_segments(self, points: np.ndarray, grouping: Grouping) -> nd.Tensor:
        """Mean-pool lifted points per occupied (pillar, vertical bin): [S, C]."""
        if grouping.bins != self.vertical_bins:
            raise ValueError(
                f"grouping has {grouping.bins} bins, encoder expects {self.vertical_bins}"
            )
        lifted = _lift_ordered(points, grouping, self.lift)
        return nd.segment_mean(lifted, grouping.starts, grouping.counts)

    def pooled_cells(self, points: np.ndarray, grouping: Grouping) -> tuple[nd.Tensor, np.ndarray]:
        """Mean-pool lifted points per (pillar, vertical bin): [G, bins, C] + mask."""
        return _dense_bins(self.pooled_segments(points, grouping), grouping)

    def gate_from_stats(self, avg: nd.Tensor, mx: nd.Tensor) -> nd.Tensor:
        """Channel gate [G, C] from avg- and max-pooled vertical statistics."""
        squeeze = nd.add(
            self.gate_expand(nd.relu(self.gate_reduce(avg))),
            self.gate_expand(nd.relu(self.gate_reduce(mx))),
        )
        return nd.sigmoid(squeeze)

    def channel_gate(self, dense: nd.Tensor) -> nd.Tensor:
        """Sigmoid gate [G, 1, C] from avg- and max-pooled vertical statistics."""
        avg = nd.reduce(dense, axis=1, mode="mean")
        mx = nd.reduce(dense, axis=1, mode="max")
        gate = self.gate_from_stats(avg, mx)
        return nd.reshape(gate, (dense.data.shape[0], 1, self.channels))

    def vertical_gate(self, gated: nd.Tensor) -> nd.Tensor:
        """Sigmoid gate [G, bins, 1] from per-bin channel statistics."""
        n, bins, _ = gated.data.shape
        avg = nd.reshape(nd.reduce(gated, axis=2, mode="mean"), (n, bins, 1))
        mx = nd.reshape(nd.reduce(gated, axis=2, mode="max"), (n, bins, 1))
        return nd.sigmoid(self.depth_conv(nd.concat([avg, mx], axis=2)))

    def attend(self, dense: nd.Tensor, mask: np.ndarray) -> nd.Tensor:
        """Apply channel then vertical gates and re-zero empty bins, [G, bins, C]."""
        gated = nd.mul(dense, self.channel_gate(dense))
        gated = nd.mul(gated, self.vertical_gate(gated))
        # empty bins must stay exactly zero for the reshape-concat semantics
        return nd.mul(gated, mask[:, :, None].astype(np.float64))

    def collapse(self, dense: nd.Tensor, mask: np.ndarray) -> nd.Tensor:
        """Full collapse of the vertical axis: attention, flatten, MLP -> [G, C]."""
        attended = self.attend(dense, mask)
        n = dense.data.shape[0]
        return self.out(nd.reshape(attended, (n, self.vertical_bins * self.channels)))

    def attended_segments(self, pooled: nd.Tensor, grouping: Grouping) -> nd.Tensor:
        """Both attention gates applied on the occupied segments only, [S, C].

        Equivalent to ``attend`` on the dense layout: empty bins contribute
        exact zeros to every pooled statistic, so the gates can be computed
        from the [S, C] rows plus occupancy counts, and the gated values for
        empty bins would be zero anyway.  This keeps the working set
        proportional to occupied bins rather than cells x bins.
        """
        bins, n_cells = grouping.bins, grouping.n_cells
        run_starts, run_counts = grouping.cell_runs()
        # vertical-axis stats per cell; missing bins are zeros in the dense
        # view, so sum/bins is the mean, and the max dips to zero unless every
        # bin is occupied
        avg = nd.mul(nd.segment_sum(pooled, run_starts, run_counts), 1.0 / bins)
        seg_max = nd.segment_max(pooled, run_starts, run_counts)
        full = (run_counts == bins).reshape(-1, 1)
        mx = nd.where(full, seg_max, nd.relu(seg_max))
        gate = self.gate_from_stats(avg, mx)
        gated = nd.mul(pooled, nd.gather_rows(gate, grouping.segment_row))

        # bin-axis gate: per-bin channel stats laid out densely for the conv
        n_seg = gated.data.shape[0]
        ch_avg = nd.reshape(nd.reduce(gated, axis=1, mode="mean"), (n_seg, 1))
        ch_max = nd.reshape(nd.reduce(gated, axis=1, mode="max"), (n_seg, 1))
        slots = grouping.flat_segment_slots()
        conv_in = nd.scatter_rows(nd.concat([ch_avg, ch_max], axis=1), slots, n_cells * bins)
        depth = nd.sigmoid(self.depth_conv(nd.reshape(conv_in, (n_cells, bins, 2))))
        depth_rows = nd.gather_rows(nd.reshape(depth, (n_cells * bins, 1)), slots)
        return nd.mul(gated, depth_rows)

    def encode(self, points: np.ndarray, grouping: Grouping) -> SparseFeatureSet:
        pooled = self.pooled_segments(points, grouping)
        attended = self.attended_segments(pooled, grouping)
        feats = nd.binned_linear(
            attended,
            grouping.flat_segment_slots(),
            grouping.n_cells,
            self.vertical_bins,
            self.out.linear.weight,
            self.out.linear.bias,
        )
        if self.out.with_relu:
            feats = nd.relu(feats)
        return SparseFeatureSet(
            coords=grouping.coords,
            feats=feats,
            n_x=grouping.grid.n_x,
            n_y=grouping.grid.n_y,
        )


class TemporalEncoder(nd.Module):
    """Per-pillar sweep-time-bin features collapsed by reshape + MLP."""

    def __init__(self, channels: int, temporal_bins: int, rng: np.random.Generator):
        self.channels = channels
        self.temporal_bins = temporal_bins
        self.lift = nd.Mlp(AUGMENT_DIM, channels, rng, name="temporal.lift")
        self.out = nd.Mlp(temporal_bins * channels, channels, rng, name="temporal.out")

    def pooled_segments(self, points: np.ndarray, grouping: Grouping) -> nd.Tensor:
        """Mean-pool lifted points per occupied (pillar, time bin): [S, C]."""
        if grouping.bins != self.temporal_bins:
            raise ValueError(
                f"grouping has {grouping.bins} bins, encoder expects {self.temporal_bins}"
            )
        lifted = _lift_ordered(points, grouping, self.lift)
        return nd.segment_mean(lifted, grouping.starts, grouping.counts)

    def pooled_cells(self, points: np.ndarray, grouping: Grouping) -> tuple[nd.Tensor, np.ndarray]:
        return _dense_bins(self.pooled_segments(points, grouping), grouping)

    def collapse(self, dense: nd.Tensor) -> nd.Tensor:
        n = dense.data.shape[0]
        return self.out(nd.reshape(dense, (n, self.temporal_bins * self.channels)))

    def encode(self, points: np.ndarray, grouping: Grouping) -> SparseFeatureSet:
        pooled = self.pooled_segments(points, grouping)
        feats = nd.binned_linear(
            pooled,
            grouping.flat_segment_slots(),
            grouping.n_cells,
            self.temporal_bins,
            self.out.linear.weight,
            self.out.linear.bias,
        )
        if self.out.with_relu:
            feats = nd.relu(feats)
        return SparseFeatureSet(
            coords=grouping.coords,
            feats=feats,
            n_x=grouping.grid.n_x,
            n_y=grouping.grid.n_y,
        )


class HorizontalEncoder(nd.Module):
    """Dual-grid cell features merged point-wise and pooled onto the base grid.

    Each point reads the max-pooled feature of its base cell and of its
    shifted cell (two separate lifts), the concatenation is reduced back to
    ``channels``, and the per-point results are max-pooled into base cells.
    The half-cell offset grid splits point sets that the base grid lumps
    together, which is the extra horizontal detail this branch contributes.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.lift_base = nd.Mlp(AUGMENT_DIM, channels, rng, name="horizontal.lift_base")
        self.lift_shifted = nd.Mlp(AUGMENT_DIM, channels, rng, name="horizontal.lift_shifted")
        self.merge = nd.Mlp(2 * channels, channels, rng, name="horizontal.merge")

    def cell_features(self, points: np.ndarray, grouping: Grouping, lift: nd.Mlp) -> nd.Tensor:
        """Lift + max-pool one grid's points into its cells, [G, C]."""
        lifted = _lift_ordered(points, grouping, lift)
        return nd.segment_max(lifted, grouping.starts, grouping.counts)

    def encode(
        self,
        points: np.ndarray,
        base: Grouping,
        shifted: Grouping,
        n_total_points: int,
    ) -> SparseFeatureSet:
        if base.n_points != shifted.n_points:
            raise ValueError("base and shifted groupings must cover the same points")
        base_cells = self.cell_features(points, base, self.lift_base)
        shifted_cells = self.cell_features(points, shifted, self.lift_shifted)

        # per point (base canonical order): its base cell row and shifted cell row
        base_rows = base.point_row()
        shifted_row_of = shifted.row_of_original(n_total_points)
        shifted_rows = shifted_row_of[base.point_order]
        per_point = nd.concat(
            [nd.gather_rows(base_cells, base_rows), nd.gather_rows(shifted_cells, shifted_rows)],
            axis=1,
        )
        merged = self.merge(per_point)
        feats = nd.segment_max(merged, base.starts, base.counts)
        return SparseFeatureSet(
            coords=base.coords, feats=feats, n_x=base.grid.n_x, n_y=base.grid.n_y
        )
