"""Point-cloud ingestion, validation, and synthetic scene generation.

Points are dense [N, 5] float64 arrays with columns (x, y, z, r, dt): meters,
reflectance, and the time lag in seconds of the sweep the point came from.
Two on-disk formats:

* ``bin5`` — packed little-endian float32, one (x, y, z, r, dt) record per
  point.  Round-trips are bit-exact for float32-representable values, which
  everything written by this module is.
* ``csv`` — header ``x,y,z,r,dt`` and one row per point.

Either format may carry a JSON sidecar (``<path>.meta.json``) holding the
generator metadata and ground-truth boxes; the loader restores it when
present.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

POINT_FIELDS = ("x", "y", "z", "r", "dt")
POINT_DIM = len(POINT_FIELDS)
RECORD_BYTES = 4 * POINT_DIM

#: length in seconds of the sweep window folded into one keyframe; dt of every
#: admitted point lies in [0, TIME_WINDOW).
TIME_WINDOW = 0.5

#: default detection range (meters); box placement and background sampling
#: stay inside these bounds so generated scenes quantize without clipping.
DEFAULT_X_RANGE = (-54.0, 54.0)
DEFAULT_Y_RANGE = (-54.0, 54.0)
DEFAULT_Z_RANGE = (-5.0, 3.0)


class PointCloudError(Exception):
    """Unreadable, truncated, or malformed point-cloud file."""


def wrap_angle(angle: float) -> float:
    """Wrap an angle in radians to [-pi, pi)."""
    return float((angle + math.pi) % (2.0 * math.pi) - math.pi)


@dataclass(frozen=True)
class Box3D:
    """Axis-aligned-in-z 3D box: center, size, and yaw about +z."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got l={self.l} w={self.w} h={self.h}")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def corners_bev(self) -> np.ndarray:
        """The four BEV footprint corners, [4, 2], counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        half = np.array(
            [[+self.l, +self.w], [-self.l, +self.w], [-self.l, -self.w], [+self.l, -self.w]]
        ) * 0.5
        rot = np.array([[c, -s], [s, c]])
        return half @ rot.T + np.array([self.cx, self.cy])

    def to_dict(self) -> dict:
        return {
            "cx": self.cx, "cy": self.cy, "cz": self.cz,
            "l": self.l, "w": self.w, "h": self.h,
            "yaw": self.yaw, "class_id": self.class_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(**{k: d[k] for k in ("cx", "cy", "cz", "l", "w", "h", "yaw", "class_id")})


@dataclass
class Scene:
    """A point cloud plus optional ground-truth boxes and generator metadata."""

    points: np.ndarray
    boxes: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, POINT_DIM)
        if pts.ndim != 2 or pts.shape[1] != POINT_DIM:
            raise ValueError(f"points must be [N, {POINT_DIM}], got shape {pts.shape}")
        self.points = np.ascontiguousarray(pts)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def validate_points(points: np.ndarray) -> tuple[np.ndarray, int]:
    """Drop rows with non-finite fields or dt outside [0, TIME_WINDOW).

    Returns (clean points, number of dropped rows).  Row order is preserved.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, POINT_DIM)
    keep = np.isfinite(pts).all(axis=1)
    keep &= (pts[:, 4] >= 0.0) & (pts[:, 4] < TIME_WINDOW)
    n_dropped = int(pts.shape[0] - keep.sum())
    return np.ascontiguousarray(pts[keep]), n_dropped


# ---------------------------------------------------------------------------
# file formats


def _infer_format(path, fmt: Optional[str]) -> str:
    if fmt is None:
        fmt = "csv" if str(path).endswith(".csv") else "bin5"
    if fmt not in ("bin5", "csv"):
        raise ValueError(f"unknown point format {fmt!r} (expected 'bin5' or 'csv')")
    return fmt


def sidecar_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def save_points(scene: Scene, path, fmt: Optional[str] = None) -> None:
    """Write a scene's points to disk, plus a JSON sidecar if it has boxes/meta."""
    path = Path(path)
    fmt = _infer_format(path, fmt)
    try:
        if fmt == "bin5":
            path.write_bytes(scene.points.astype("<f4").tobytes())
        else:
            with path.open("w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(POINT_FIELDS)
                for row in scene.points:
                    writer.writerow([repr(float(v)) for v in row])
    except OSError as exc:
        raise PointCloudError(f"cannot write {path}: {exc}") from exc
    if scene.boxes or scene.meta:
        sidecar = {
            "meta": scene.meta,
            "boxes": [b.to_dict() for b in scene.boxes],
        }
        sidecar_path(path).write_text(json.dumps(sidecar, indent=2) + "\n")


def _load_bin5(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) % RECORD_BYTES != 0:
        raise PointCloudError(
            f"{path}: truncated record ({len(raw)} bytes is not a multiple of {RECORD_BYTES})"
        )
    flat = np.frombuffer(raw, dtype="<f4")
    return flat.reshape(-1, POINT_DIM).astype(np.float64)


def _load_csv(path: Path) -> np.ndarray:
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != POINT_FIELDS:
            raise PointCloudError(f"{path}:1: expected header {','.join(POINT_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != POINT_DIM:
                raise PointCloudError(f"{path}:{lineno}: expected {POINT_DIM} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise PointCloudError(f"{path}:{lineno}: {exc}") from exc
    return np.asarray(rows, dtype=np.float64).reshape(-1, POINT_DIM)


def load_points(path, fmt: Optional[str] = None) -> Scene:
    """Load points, dropping invalid rows; restores the sidecar when present.

    The dropped-row count lands in ``scene.meta["dropped"]``.
    """
    path = Path(path)
    fmt = _infer_format(path, fmt)
    try:
        pts = _load_bin5(path) if fmt == "bin5" else _load_csv(path)
    except OSError as exc:
        raise PointCloudError(f"cannot read {path}: {exc}") from exc
    pts, n_dropped = validate_points(pts)
    boxes: list[Box3D] = []
    meta: dict = {}
    side = sidecar_path(path)
    if side.exists():
        try:
            payload = json.loads(side.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise PointCloudError(f"cannot read sidecar {side}: {exc}") from exc
        meta = dict(payload.get("meta", {}))
        boxes = [Box3D.from_dict(d) for d in payload.get("boxes", [])]
    meta["dropped"] = n_dropped
    return Scene(points=pts, boxes=boxes, meta=meta)


# ---------------------------------------------------------------------------
# synthetic scenes


def _as_float32_exact(points: np.ndarray) -> np.ndarray:
    """Snap float64 values onto the float32 grid so bin5 round-trips bit-exactly."""
    return points.astype(np.float32).astype(np.float64)


def gen_scene(
    seed: int,
    n_boxes: int,
    points_per_box: int,
    background_points: int,
    sweeps: int = 1,
    x_range: Sequence[float] = DEFAULT_X_RANGE,
    y_range: Sequence[float] = DEFAULT_Y_RANGE,
    z_range: Sequence[float] = DEFAULT_Z_RANGE,
) -> Scene:
    """Deterministic synthetic scene: boxes, foreground points, background noise.

    Boxes get uniform centers (kept fully inside the range), sizes, and yaw.
    Foreground points are sampled strictly inside their box (99% of each
    half-extent, so containment survives float32 rounding).  Reflectance uses
    the 8-bit intensity convention of automotive LiDAR: object surfaces
    (bodywork, plates) return strong values, diffuse background clutter weak
    ones.  Every point's dt is k * (TIME_WINDOW / sweeps) plus jitter below
    half a bin, for a uniform random sweep index k; with sweeps=1 all dt are
    exactly 0.
    """
    if min(n_boxes, points_per_box, background_points) < 0:
        raise ValueError("counts must be >= 0")
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    rng = np.random.default_rng(seed)

    boxes: list[Box3D] = []
    chunks: list[np.ndarray] = []
    for _ in range(n_boxes):
        l = rng.uniform(2.0, 6.0)
        w = rng.uniform(1.0, 3.0)
        h = rng.uniform(1.0, 2.5)
        yaw = rng.uniform(-math.pi, math.pi)
        margin = 0.5 * math.hypot(l, w)
        cx = rng.uniform(x_range[0] + margin, x_range[1] - margin)
        cy = rng.uniform(y_range[0] + margin, y_range[1] - margin)
        cz = rng.uniform(z_range[0] + 0.5 * h, z_range[1] - 0.5 * h)
        box = Box3D(cx, cy, cz, l, w, h, yaw, class_id=len(boxes))
        boxes.append(box)
        if points_per_box:
            local = rng.uniform(-0.495, 0.495, size=(points_per_box, 3))
            local *= np.array([l, w, h])
            c, s = math.cos(yaw), math.sin(yaw)
            gx = cx + c * local[:, 0] - s * local[:, 1]
            gy = cy + s * local[:, 0] + c * local[:, 1]
            gz = cz + local[:, 2]
            refl = rng.uniform(96.0, 255.0, size=points_per_box)
            chunks.append(np.column_stack([gx, gy, gz, refl, np.zeros(points_per_box)]))

    if background_points:
        bg = np.column_stack(
            [
                rng.uniform(x_range[0], x_range[1], size=background_points),
                rng.uniform(y_range[0], y_range[1], size=background_points),
                rng.uniform(z_range[0], z_range[1], size=background_points),
                rng.uniform(0.0, 64.0, size=background_points),
                np.zeros(background_points),
            ]
        )
        chunks.append(bg)

    points = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, POINT_DIM))
    if sweeps > 1 and len(points):
        bin_width = TIME_WINDOW / sweeps
        k = rng.integers(0, sweeps, size=len(points))
        jitter = rng.uniform(0.0, 0.5 * bin_width, size=len(points))
        points[:, 4] = k * bin_width + jitter
    points = _as_float32_exact(points)

    meta = {
        "seed": int(seed),
        "n_boxes": int(n_boxes),
        "points_per_box": int(points_per_box),
        "background_points": int(background_points),
        "sweeps": int(sweeps),
        "x_range": list(map(float, x_range)),
        "y_range": list(map(float, y_range)),
        "z_range": list(map(float, z_range)),
    }
    return Scene(points=points, boxes=boxes, meta=meta)
