"""BEV pillar grid geometry, point quantization, and deterministic grouping.

Everything downstream (encoders, fusion, labels) consumes the structures
built here.  The load-bearing guarantee is *bit-reproducibility*: grouped
pooling results are identical no matter how the input points were ordered.
That comes from sorting points into a canonical order keyed by (cell, bin,
x, y, z, r, dt) — a content key, so any permutation of the same multiset of
points sorts identically — and then accumulating sums strictly left to
right within each segment (see ``nd.sequential_segment_sum``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from fgpfe import nd
from fgpfe.nd.ops import sequential_segment_sum
from fgpfe.pcio import TIME_WINDOW

# grouping keys
KEY_PILLAR = "pillar"
KEY_PILLAR_VERTICAL = "pillar-vertical"
KEY_PILLAR_TEMPORAL = "pillar-temporal"
KEY_SHIFTED_PILLAR = "shifted-pillar"
GROUP_KEYS = (KEY_PILLAR, KEY_PILLAR_VERTICAL, KEY_PILLAR_TEMPORAL, KEY_SHIFTED_PILLAR)

SPARSE_MAGIC = b"FGPFSPRS"
SPARSE_VERSION = 1


@dataclass(frozen=True)
class GridSpec:
    """A uniform 2D cell grid over the x-y detection range.

    ``offset`` shifts the grid origin; the half-cell-shifted companion grid
    used by the horizontal encoder is ``base.shifted()``.
    """

    x_range: tuple = (-54.0, 54.0)
    y_range: tuple = (-54.0, 54.0)
    z_range: tuple = (-5.0, 3.0)
    cell: tuple = (0.075, 0.075)
    offset: tuple = (0.0, 0.0)

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name} must be increasing, got ({lo}, {hi})")
        if min(self.cell) <= 0:
            raise ValueError(f"cell sizes must be positive, got {self.cell}")

    @property
    def n_x(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell[0]))

    @property
    def n_y(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell[1]))

    def shifted(self) -> "GridSpec":
        """The same grid translated by half a cell in +x and +y."""
        return replace(self, offset=(self.offset[0] + 0.5 * self.cell[0],
                                     self.offset[1] + 0.5 * self.cell[1]))

    def cell_centers(self, coords: np.ndarray) -> np.ndarray:
        """World-frame (x, y) centers of cells given as integer (ix, iy), [N, 2]."""
        coords = np.asarray(coords)
        cx = self.x_range[0] + self.offset[0] + (coords[:, 0] + 0.5) * self.cell[0]
        cy = self.y_range[0] + self.offset[1] + (coords[:, 1] + 0.5) * self.cell[1]
        return np.column_stack([cx, cy])


@dataclass(frozen=True)
class VirtualGridSpec:
    """Bin counts of the per-pillar virtual grids.

    ``vertical_bins`` partitions the z-range; ``temporal_bins`` partitions the
    sweep-time window [0, TIME_WINDOW).
    """

    vertical_bins: int = 8
    temporal_bins: int = 10

    def __post_init__(self):
        if self.vertical_bins < 1 or self.temporal_bins < 1:
            raise ValueError("virtual grid bin counts must be >= 1")


@dataclass
class CellIndex:
    """Per-point integer coordinates under every grid, plus the range flag.

    Out-of-range points carry -1 in every index column.  Shifted coordinates
    are clamped into the shifted grid, so the half-cell border strip maps to
    the nearest edge cell instead of being dropped.
    """

    pillar_x: np.ndarray
    pillar_y: np.ndarray
    shifted_x: np.ndarray
    shifted_y: np.ndarray
    vertical: np.ndarray
    temporal: np.ndarray
    in_range: np.ndarray

    @property
    def n_points(self) -> int:
        return self.in_range.shape[0]

    @property
    def n_in_range(self) -> int:
        return int(self.in_range.sum())


def _axis_index(coord: np.ndarray, lo: float, offset: float, step: float, n: int) -> np.ndarray:
    """floor((coord - lo - offset)/step) clipped into [0, n)."""
    idx = np.floor((coord - lo - offset) / step).astype(np.int64)
    return np.clip(idx, 0, n - 1)


def quantize(points: np.ndarray, grid: GridSpec, virtual: VirtualGridSpec) -> CellIndex:
    """Assign every point to its pillar, shifted pillar, vertical and temporal bin.

    Bounds use the base grid: min edge inclusive, max edge exclusive, applied
    to the raw coordinates (so a point exactly on the max edge is
    out-of-range even though index clipping alone would keep it).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 5)
    x, y, z, dt = pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 4]

    in_range = (
        (x >= grid.x_range[0]) & (x < grid.x_range[1])
        & (y >= grid.y_range[0]) & (y < grid.y_range[1])
        & (z >= grid.z_range[0]) & (z < grid.z_range[1])
        & (dt >= 0.0) & (dt < TIME_WINDOW)
    )

    dx, dy = grid.cell
    sgrid = grid.shifted()
    z_step = (grid.z_range[1] - grid.z_range[0]) / virtual.vertical_bins
    t_step = TIME_WINDOW / virtual.temporal_bins

    cols = {
        "pillar_x": _axis_index(x, grid.x_range[0], grid.offset[0], dx, grid.n_x),
        "pillar_y": _axis_index(y, grid.y_range[0], grid.offset[1], dy, grid.n_y),
        "shifted_x": _axis_index(x, grid.x_range[0], sgrid.offset[0], dx, grid.n_x),
        "shifted_y": _axis_index(y, grid.y_range[0], sgrid.offset[1], dy, grid.n_y),
        "vertical": _axis_index(z, grid.z_range[0], 0.0, z_step, virtual.vertical_bins),
        "temporal": _axis_index(dt, 0.0, 0.0, t_step, virtual.temporal_bins),
    }
    for name, arr in cols.items():
        arr[~in_range] = -1
        cols[name] = arr
    return CellIndex(in_range=in_range, **cols)


# ---------------------------------------------------------------------------
# grouping


@dataclass
class Grouping:
    """Points bucketed into cells (and bins) in canonical order.

    ``point_order`` lists original point indices so that segment g's points
    are ``point_order[starts[g] : starts[g] + counts[g]]``; segments are
    sorted by (cell, bin) and cells by (ix, iy).  ``coords`` holds the unique
    non-empty cells on ``grid``.
    """

    key: str
    grid: GridSpec
    bins: int
    coords: np.ndarray          # [G, 2] int64, canonical order
    point_order: np.ndarray     # [M] original point ids
    starts: np.ndarray          # [S] segment offsets into point_order
    counts: np.ndarray          # [S]
    segment_row: np.ndarray     # [S] row of coords owning each segment
    segment_bin: np.ndarray     # [S] bin of each segment (0 when bins == 1)

    @property
    def n_cells(self) -> int:
        return self.coords.shape[0]

    @property
    def n_points(self) -> int:
        return self.point_order.shape[0]

    @property
    def n_segments(self) -> int:
        return self.starts.shape[0]

    def point_segment(self) -> np.ndarray:
        """Segment id of each point in canonical order, [M]."""
        return np.repeat(np.arange(self.n_segments), self.counts)

    def point_row(self) -> np.ndarray:
        """Cell row of each point in canonical order, [M]."""
        return self.segment_row[self.point_segment()]

    def row_of_original(self, n_total: int) -> np.ndarray:
        """Map original point id -> cell row (-1 for points not grouped)."""
        out = np.full(n_total, -1, dtype=np.int64)
        out[self.point_order] = self.point_row()
        return out

    def cell_runs(self) -> tuple[np.ndarray, np.ndarray]:
        """Contiguous runs of segments per cell: (starts, counts) over segments.

        Segments are sorted by (cell, bin), so each cell's segments form one
        run; run g corresponds to coords row g.
        """
        row = self.segment_row
        if row.shape[0] == 0:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        starts = np.concatenate([[0], np.flatnonzero(np.diff(row)) + 1]).astype(np.int64)
        counts = np.diff(np.append(starts, row.shape[0])).astype(np.int64)
        return starts, counts

    def flat_segment_slots(self) -> np.ndarray:
        """Strictly increasing slot ids row*bins + bin, one per segment."""
        return self.segment_row * np.int64(self.bins) + self.segment_bin


def content_order(points: np.ndarray, index: CellIndex) -> np.ndarray:
    """Canonical order of the in-range points by content: (x, y, z, r, dt).

    Returns positions into the in-range subset (``points[in_range][order]``
    is sorted).  Grouping sorts by cell code first and point content second;
    precomputing the content part once lets several groupings over the same
    scene share it instead of re-sorting five float columns each.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 5)
    sub = pts[index.in_range]
    # x alone almost always decides the order for continuous coordinates; the
    # remaining keys only matter on x ties, so fall back to the full lexsort
    # exactly when a tie exists (identical permutation either way)
    order = np.argsort(sub[:, 0], kind="stable")
    xs = sub[order, 0]
    if xs.size and np.any(xs[1:] == xs[:-1]):
        return np.lexsort((sub[:, 4], sub[:, 3], sub[:, 2], sub[:, 1], sub[:, 0]))
    return order


def build_grouping(
    points: np.ndarray,
    index: CellIndex,
    key: str,
    grid: GridSpec,
    virtual: VirtualGridSpec,
    order_by_content: Optional[np.ndarray] = None,
) -> Grouping:
    """Bucket in-range points by the requested key in canonical order.

    ``order_by_content`` is an optional precomputed ``content_order`` result
    for the same points and index, shared across groupings.
    """
    if key not in GROUP_KEYS:
        raise ValueError(f"unknown grouping key {key!r} (expected one of {GROUP_KEYS})")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 5)
    orig_ids = np.flatnonzero(index.in_range)

    if key == KEY_SHIFTED_PILLAR:
        cell_x, cell_y = index.shifted_x[orig_ids], index.shifted_y[orig_ids]
        grid_used = grid.shifted()
    else:
        cell_x, cell_y = index.pillar_x[orig_ids], index.pillar_y[orig_ids]
        grid_used = grid

    if key == KEY_PILLAR_VERTICAL:
        bins, bin_idx = virtual.vertical_bins, index.vertical[orig_ids]
    elif key == KEY_PILLAR_TEMPORAL:
        bins, bin_idx = virtual.temporal_bins, index.temporal[orig_ids]
    else:
        bins, bin_idx = 1, np.zeros(len(orig_ids), dtype=np.int64)

    flat_cell = cell_x * np.int64(grid_used.n_y) + cell_y
    code = flat_cell * np.int64(bins) + bin_idx
    # canonical order: (cell, bin) first, then point content — a stable sort
    # of the code over content-ordered points equals the one-shot lexsort of
    # (content keys..., code)
    if order_by_content is None:
        order_by_content = content_order(pts, index)
    elif order_by_content.shape != (len(orig_ids),):
        raise ValueError("order_by_content does not match the in-range point count")
    order = order_by_content[np.argsort(code[order_by_content], kind="stable")]

    sorted_code = code[order]
    if len(order):
        is_start = np.concatenate([[True], sorted_code[1:] != sorted_code[:-1]])
        starts = np.flatnonzero(is_start).astype(np.int64)
        counts = np.diff(np.append(starts, len(order))).astype(np.int64)
    else:
        starts = np.zeros(0, dtype=np.int64)
        counts = np.zeros(0, dtype=np.int64)
    seg_code = sorted_code[starts]
    seg_cell = seg_code // bins
    seg_bin = (seg_code - seg_cell * bins).astype(np.int64)
    unique_cells, segment_row = np.unique(seg_cell, return_inverse=True)
    coords = np.column_stack(
        [unique_cells // grid_used.n_y, unique_cells % grid_used.n_y]
    ).astype(np.int64)

    return Grouping(
        key=key,
        grid=grid_used,
        bins=bins,
        coords=coords,
        point_order=orig_ids[order],
        starts=starts,
        counts=counts,
        segment_row=segment_row.astype(np.int64),
        segment_bin=seg_bin,
    )


# ---------------------------------------------------------------------------
# pooled outputs


@dataclass
class SparseFeatureSet:
    """Per-cell features over the non-empty cells of a grid.

    ``coords`` are unique and canonically sorted; ``feats`` is [N, C] and may
    be a plain array or an ``nd.Tensor`` (the differentiable path).
    """

    coords: np.ndarray
    feats: Union[np.ndarray, nd.Tensor]
    n_x: int
    n_y: int

    @property
    def n_cells(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        data = self.feats.data if isinstance(self.feats, nd.Tensor) else self.feats
        return data.shape[1]


@dataclass
class PooledCells:
    """Dense per-cell virtual-grid features: [N, bins, C] plus occupancy mask."""

    coords: np.ndarray        # [N, 2]
    feats: np.ndarray         # [N, bins, C]
    mask: np.ndarray          # [N, bins] bool
    grid: GridSpec
    key: str

    @property
    def n_cells(self) -> int:
        return self.coords.shape[0]


FeatureFn = Callable[[np.ndarray, Grouping], np.ndarray]


def _segment_pool(feats: np.ndarray, grouping: Grouping, pool: str) -> np.ndarray:
    """Pool [M, C] point features into [S, C] segment features."""
    if pool == "mean":
        sums = sequential_segment_sum(feats, grouping.starts, grouping.counts)
        denom = grouping.counts.astype(np.float64).reshape(-1, 1)
        return sums / np.maximum(denom, 1.0)
    if pool == "max":
        if grouping.n_segments == 0:
            return np.zeros((0, feats.shape[1]))
        return np.maximum.reduceat(feats, grouping.starts, axis=0)
    raise ValueError(f"unknown pool {pool!r} (expected 'mean' or 'max')")


def group_pool(
    points: np.ndarray,
    grouping: Grouping,
    pool: str = "mean",
    feature_fn: Optional[FeatureFn] = None,
) -> Union[SparseFeatureSet, PooledCells]:
    """Pool per-point features into cells (plain keys) or cell bins (virtual keys).

    ``feature_fn(ordered_points, grouping) -> [M, C]`` maps the canonical-order
    point block to features; the default keeps the raw 5 columns.  Mean
    pooling accumulates in canonical order, so results are bit-identical
    under any permutation of the input points.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 5)
    ordered = pts[grouping.point_order]
    feats = np.asarray(
        feature_fn(ordered, grouping) if feature_fn is not None else ordered,
        dtype=np.float64,
    )
    if feats.ndim != 2 or feats.shape[0] != grouping.n_points:
        raise ValueError(f"feature_fn must return [n_points, C], got {feats.shape}")
    pooled = _segment_pool(feats, grouping, pool)

    if grouping.bins == 1:
        # one segment per cell, already in cell order
        return SparseFeatureSet(
            coords=grouping.coords,
            feats=pooled,
            n_x=grouping.grid.n_x,
            n_y=grouping.grid.n_y,
        )
    dense = np.zeros((grouping.n_cells, grouping.bins, feats.shape[1]))
    mask = np.zeros((grouping.n_cells, grouping.bins), dtype=bool)
    dense[grouping.segment_row, grouping.segment_bin] = pooled
    mask[grouping.segment_row, grouping.segment_bin] = True
    return PooledCells(
        coords=grouping.coords, feats=dense, mask=mask, grid=grouping.grid, key=grouping.key
    )


# ---------------------------------------------------------------------------
# dense BEV scatter/gather


def _check_coords(coords: np.ndarray, n_x: int, n_y: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if len(coords):
        if coords.min() < 0 or coords[:, 0].max() >= n_x or coords[:, 1].max() >= n_y:
            raise ValueError("cell coordinates outside the grid")
    flat = coords[:, 0] * np.int64(n_y) + coords[:, 1]
    if len(np.unique(flat)) != len(flat):
        raise ValueError("duplicate cell coordinates")
    return coords


def scatter_to_bev(sparse: SparseFeatureSet) -> nd.Tensor:
    """Spread sparse cell features onto the dense [n_y, n_x, C] BEV map.

    Differentiable when ``sparse.feats`` is a Tensor; zeros everywhere no cell
    exists.  Map rows index y, columns index x.
    """
    coords = _check_coords(sparse.coords, sparse.n_x, sparse.n_y)
    flat = coords[:, 1] * np.int64(sparse.n_x) + coords[:, 0]
    feats = sparse.feats
    if isinstance(feats, nd.Tensor):
        dense = nd.scatter_rows(feats, flat, sparse.n_y * sparse.n_x)
        return nd.reshape(dense, (sparse.n_y, sparse.n_x, feats.data.shape[1]))
    out = np.zeros((sparse.n_y, sparse.n_x, feats.shape[1]))
    out[coords[:, 1], coords[:, 0]] = feats
    return nd.Tensor(out)


def gather_from_bev(bev, coords: np.ndarray) -> Union[np.ndarray, nd.Tensor]:
    """Read back per-cell rows from a dense BEV map (inverse of scatter)."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if isinstance(bev, nd.Tensor):
        n_y, n_x, c = bev.data.shape
        flat = coords[:, 1] * np.int64(n_x) + coords[:, 0]
        return nd.gather_rows(nd.reshape(bev, (n_y * n_x, c)), flat)
    return np.asarray(bev)[coords[:, 1], coords[:, 0]]


# ---------------------------------------------------------------------------
# sparse dump format


def save_sparse(sparse: SparseFeatureSet, path) -> None:
    """Binary dump: magic, version, (n_x, n_y, C, N), int32 coords, f32 rows."""
    feats = sparse.feats.data if isinstance(sparse.feats, nd.Tensor) else sparse.feats
    header = np.array(
        [SPARSE_VERSION, sparse.n_x, sparse.n_y, feats.shape[1], sparse.n_cells],
        dtype="<u4",
    )
    with open(path, "wb") as fh:
        fh.write(SPARSE_MAGIC)
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(sparse.coords, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def load_sparse(path) -> SparseFeatureSet:
    raw = Path(path).read_bytes()
    if raw[:8] != SPARSE_MAGIC:
        raise ValueError(f"{path}: not a sparse feature dump")
    version, n_x, n_y, width, n = np.frombuffer(raw, dtype="<u4", count=5, offset=8)
    if version != SPARSE_VERSION:
        raise ValueError(f"{path}: unsupported dump version {version}")
    offset = 8 + 20
    need = offset + 8 * n + 4 * n * width
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    coords = np.frombuffer(raw, dtype="<i4", count=2 * int(n), offset=offset)
    offset += 8 * int(n)
    feats = np.frombuffer(raw, dtype="<f4", count=int(n) * int(width), offset=offset)
    return SparseFeatureSet(
        coords=coords.reshape(-1, 2).astype(np.int64),
        feats=feats.reshape(int(n), int(width)).astype(np.float64),
        n_x=int(n_x),
        n_y=int(n_y),
    )
