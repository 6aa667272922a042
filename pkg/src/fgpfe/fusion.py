"""Fusing the three encoder branches into final per-pillar features.

The three branches emit rows over (possibly) different non-empty cell sets,
so they are first aligned onto the union coordinate list (zero rows where a
branch has no cell).  Fusion then reduces each branch's channels, gates the
concatenation with a per-row squeeze–excitation attention, and maps back to
the encoder width, keeping the output a drop-in replacement for a plain
pillar feature map.  ``full_encode`` runs the whole pipeline from raw points
to the dense BEV tensor.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from fgpfe import nd
from fgpfe.encoders import HorizontalEncoder, TemporalEncoder, VerticalEncoder
from fgpfe.gridding import (
    GridSpec,
    KEY_PILLAR,
    KEY_PILLAR_TEMPORAL,
    KEY_PILLAR_VERTICAL,
    KEY_SHIFTED_PILLAR,
    SparseFeatureSet,
    VirtualGridSpec,
    build_grouping,
    content_order,
    quantize,
    scatter_to_bev,
)

BEV_MAGIC = b"FGPFBEVD"
BEV_VERSION = 1


def align_branches(
    branches: Sequence[SparseFeatureSet],
) -> tuple[np.ndarray, list[Union[np.ndarray, nd.Tensor]]]:
    """Put every branch's rows on the union coordinate list, zero-filling gaps.

    Returns (coords [N, 2] in canonical order, aligned feature rows per
    branch).  Tensor branches stay differentiable through the alignment.
    """
    if not branches:
        raise ValueError("no branches to align")
    n_x, n_y = branches[0].n_x, branches[0].n_y
    codes = []
    for b in branches:
        if (b.n_x, b.n_y) != (n_x, n_y):
            raise ValueError("branches disagree on grid shape")
        coords = np.asarray(b.coords, dtype=np.int64).reshape(-1, 2)
        if len(coords) and (
            coords.min() < 0 or coords[:, 0].max() >= n_x or coords[:, 1].max() >= n_y
        ):
            raise ValueError("branch coordinate outside the grid")
        codes.append(coords[:, 0] * np.int64(n_y) + coords[:, 1])
    union = np.unique(np.concatenate(codes)) if codes else np.zeros(0, dtype=np.int64)
    coords = np.column_stack([union // n_y, union % n_y]).astype(np.int64)

    aligned: list[Union[np.ndarray, nd.Tensor]] = []
    for b, code in zip(branches, codes):
        rows = np.searchsorted(union, code)
        if isinstance(b.feats, nd.Tensor):
            aligned.append(nd.scatter_rows(b.feats, rows, len(union)))
        else:
            out = np.zeros((len(union), b.feats.shape[1]))
            out[rows] = b.feats
            aligned.append(out)
    return coords, aligned


class AttentiveFusion(nd.Module):
    """Channel-reduced concatenation of the branches, self-gated per row.

    Each branch passes through its own channel-reduction linear; the
    concatenation x is gated by sigmoid(U1 relu(U0 x)) computed from the row
    itself (pillars are independent samples, so the squeeze never mixes
    rows), then an MLP restores the encoder width.
    """

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        fused_channels: Optional[int] = None,
        reduction: int = 4,
    ):
        fused = fused_channels if fused_channels is not None else max(channels // 2, 1)
        if (3 * fused) % reduction:
            raise ValueError(
                f"reduction {reduction} must divide the concatenation width {3 * fused}"
            )
        self.channels = channels
        self.fused_channels = fused
        self.reduce_vertical = nd.Linear(channels, fused, rng, name="fusion.reduce_vertical")
        self.reduce_temporal = nd.Linear(channels, fused, rng, name="fusion.reduce_temporal")
        self.reduce_horizontal = nd.Linear(channels, fused, rng, name="fusion.reduce_horizontal")
        width = 3 * fused
        self.gate_reduce = nd.Linear(width, width // reduction, rng, bias=False,
                                     name="fusion.gate_reduce")
        self.gate_expand = nd.Linear(width // reduction, width, rng, bias=False,
                                     name="fusion.gate_expand")
        self.out = nd.Mlp(width, channels, rng, name="fusion.out")

    def gate(self, x: nd.Tensor) -> nd.Tensor:
        """Per-row channel attention: x * sigmoid(U1 relu(U0 x))."""
        score = nd.sigmoid(self.gate_expand(nd.relu(self.gate_reduce(x))))
        return nd.mul(x, score)

    def __call__(self, vertical: nd.Tensor, temporal: nd.Tensor, horizontal: nd.Tensor) -> nd.Tensor:
        x = nd.concat(
            [
                self.reduce_vertical(vertical),
                self.reduce_temporal(temporal),
                self.reduce_horizontal(horizontal),
            ],
            axis=1,
        )
        return self.out(self.gate(x))


class FullEncoder(nd.Module):
    """The complete point-to-pillar feature pipeline, all branches + fusion."""

    def __init__(
        self,
        grid: GridSpec,
        virtual: VirtualGridSpec,
        channels: int,
        rng: np.random.Generator,
        fused_channels: Optional[int] = None,
        reduction: int = 4,
        kernel_size: int = 7,
    ):
        self.grid = grid
        self.virtual = virtual
        self.channels = channels
        self.vertical = VerticalEncoder(
            channels, virtual.vertical_bins, rng, reduction=reduction, kernel_size=kernel_size
        )
        self.temporal = TemporalEncoder(channels, virtual.temporal_bins, rng)
        self.horizontal = HorizontalEncoder(channels, rng)
        self.fusion = AttentiveFusion(
            channels, rng, fused_channels=fused_channels, reduction=reduction
        )

    def branch_features(
        self, points: np.ndarray
    ) -> tuple[np.ndarray, nd.Tensor, nd.Tensor, nd.Tensor]:
        """Aligned (coords, vertical, temporal, horizontal) rows for a scene."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 5)
        index = quantize(pts, self.grid, self.virtual)
        order = content_order(pts, index)
        g_vert = build_grouping(pts, index, KEY_PILLAR_VERTICAL, self.grid, self.virtual, order)
        g_temp = build_grouping(pts, index, KEY_PILLAR_TEMPORAL, self.grid, self.virtual, order)
        g_base = build_grouping(pts, index, KEY_PILLAR, self.grid, self.virtual, order)
        g_shift = build_grouping(pts, index, KEY_SHIFTED_PILLAR, self.grid, self.virtual, order)

        v = self.vertical.encode(pts, g_vert)
        t = self.temporal.encode(pts, g_temp)
        h = self.horizontal.encode(pts, g_base, g_shift, pts.shape[0])
        coords, (va, ta, ha) = align_branches([v, t, h])
        return coords, va, ta, ha

    def encode_sparse(self, points: np.ndarray) -> SparseFeatureSet:
        """Fused per-pillar features over the non-empty cells."""
        coords, va, ta, ha = self.branch_features(points)
        fused = self.fusion(va, ta, ha)
        return SparseFeatureSet(coords=coords, feats=fused,
                                n_x=self.grid.n_x, n_y=self.grid.n_y)

    def encode_bev(self, points: np.ndarray) -> nd.Tensor:
        """Dense [n_y, n_x, channels] BEV feature map (zeros in empty cells)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 5)
        index = quantize(pts, self.grid, self.virtual)
        if not index.in_range.any():
            return nd.Tensor(np.zeros((self.grid.n_y, self.grid.n_x, self.channels)))
        return scatter_to_bev(self.encode_sparse(pts))


def full_encode(points: np.ndarray, encoder: FullEncoder) -> nd.Tensor:
    """Scene points -> dense BEV feature tensor, [n_y, n_x, channels]."""
    return encoder.encode_bev(points)


# ---------------------------------------------------------------------------
# BEV dump format


def save_bev(bev, path) -> None:
    """Binary dump: magic, version, (n_y, n_x, C) header, row-major f32 payload."""
    data = bev.data if isinstance(bev, nd.Tensor) else np.asarray(bev)
    if data.ndim != 3:
        raise ValueError(f"BEV map must be [n_y, n_x, C], got shape {data.shape}")
    header = np.array([BEV_VERSION, *data.shape], dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(BEV_MAGIC)
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_bev(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != BEV_MAGIC:
        raise ValueError(f"{path}: not a BEV dump")
    version, n_y, n_x, width = np.frombuffer(raw, dtype="<u4", count=4, offset=8)
    if version != BEV_VERSION:
        raise ValueError(f"{path}: unsupported dump version {version}")
    need = 24 + 4 * int(n_y) * int(n_x) * int(width)
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    payload = np.frombuffer(raw, dtype="<f4", offset=24)
    return payload.reshape(int(n_y), int(n_x), int(width)).astype(np.float64)
