"""Objectness labels from ground-truth boxes and the per-branch focal loss.

A pillar is foreground when its cell center falls inside the bird's-eye-view
footprint of any ground-truth box (yaw-aware rectangle test, boundary
inclusive).  Each encoder branch gets its own single-linear + sigmoid head;
the training loss is the balanced sum of the three focal losses, which
pushes every branch's features to separate foreground from background cells.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import numpy as np

from fgpfe import nd
from fgpfe.gridding import GridSpec
from fgpfe.pcio import Box3D

LABELS_MAGIC = b"FGPFLBLS"
LABELS_VERSION = 1


def point_in_box_bev(px, py, box: Box3D):
    """True where (px, py) lies inside the box footprint, boundary inclusive.

    Accepts scalars or arrays; rotates the query into the box frame and
    checks the axis-aligned half extents.
    """
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = np.asarray(px, dtype=np.float64) - box.cx
    dy = np.asarray(py, dtype=np.float64) - box.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    inside = (np.abs(u) <= 0.5 * box.l) & (np.abs(v) <= 0.5 * box.w)
    return bool(inside) if inside.ndim == 0 else inside


def make_labels(coords: np.ndarray, grid: GridSpec, boxes: Sequence[Box3D]) -> np.ndarray:
    """Binary labels per cell coordinate: 1 when any box covers the cell center."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    centers = grid.cell_centers(coords)
    hit = np.zeros(len(coords), dtype=bool)
    for box in boxes:
        hit |= point_in_box_bev(centers[:, 0], centers[:, 1], box)
    return hit.astype(np.float64)


class ObjectnessHeads(nd.Module):
    """One linear + sigmoid objectness predictor per encoder branch."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.vertical = nd.Linear(channels, 1, rng, name="head.vertical")
        self.temporal = nd.Linear(channels, 1, rng, name="head.temporal")
        self.horizontal = nd.Linear(channels, 1, rng, name="head.horizontal")

    def predict(self, feats: nd.Tensor, branch: str) -> nd.Tensor:
        """Foreground probability per row, [N]."""
        head = getattr(self, branch)
        logits = head(feats)
        return nd.reshape(nd.sigmoid(logits), (feats.data.shape[0],))


BRANCHES = ("vertical", "temporal", "horizontal")


def objectness_loss(
    branch_feats: Sequence[nd.Tensor],
    labels: np.ndarray,
    heads: ObjectnessHeads,
    balance: float = 1.0,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> nd.Tensor:
    """balance * sum over branches of focal(head(features), labels)."""
    if len(branch_feats) != len(BRANCHES):
        raise ValueError(f"expected {len(BRANCHES)} branch feature tensors")
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    total = None
    for feats, branch in zip(branch_feats, BRANCHES):
        if feats.data.shape[0] != labels.shape[0]:
            raise ValueError(
                f"{branch} rows {feats.data.shape[0]} != label count {labels.shape[0]}"
            )
        term = nd.focal_loss(heads.predict(feats, branch), labels, alpha=alpha, gamma=gamma)
        total = term if total is None else nd.add(total, term)
    return nd.mul(total, float(balance))


# ---------------------------------------------------------------------------
# labels dump


def save_labels(coords: np.ndarray, labels: np.ndarray, path) -> None:
    """Binary dump: magic, version, N, int32 coords, bit-packed labels."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    bits = np.asarray(labels, dtype=np.float64).reshape(-1) != 0.0
    if len(bits) != len(coords):
        raise ValueError("coords and labels length mismatch")
    header = np.array([LABELS_VERSION, len(coords)], dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(LABELS_MAGIC)
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(coords, dtype="<i4").tobytes())
        fh.write(np.packbits(bits).tobytes())


def load_labels(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != LABELS_MAGIC:
        raise ValueError(f"{path}: not a labels dump")
    version, n = np.frombuffer(raw, dtype="<u4", count=2, offset=8)
    if version != LABELS_VERSION:
        raise ValueError(f"{path}: unsupported dump version {version}")
    n = int(n)
    need = 16 + 8 * n + (n + 7) // 8
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    coords = np.frombuffer(raw, dtype="<i4", count=2 * n, offset=16).reshape(-1, 2)
    bits = np.unpackbits(
        np.frombuffer(raw, dtype=np.uint8, offset=16 + 8 * n), count=n
    )
    return coords.astype(np.int64), bits.astype(np.float64)
