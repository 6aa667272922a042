"""Point ingestion, validation, file round-trips, and scene generation."""

import math

import numpy as np
import pytest

from fgpfe.labels import point_in_box_bev
from fgpfe.pcio import (
    Box3D,
    PointCloudError,
    Scene,
    TIME_WINDOW,
    gen_scene,
    load_points,
    save_points,
    sidecar_path,
    validate_points,
    wrap_angle,
)


def _f32(rows) -> np.ndarray:
    """Snap to the float32 grid so bin5 round-trips are bit-exact."""
    return np.asarray(rows, dtype=np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# bin5 format


def test_bin5_two_record_roundtrip(tmp_path):
    rows = _f32([[0, 0, 0, 1, 0], [1, 1, 1, 0.5, 0.1]])
    path = tmp_path / "two.bin5"
    save_points(Scene(points=rows), path)
    scene = load_points(path)
    assert scene.n_points == 2
    assert np.array_equal(scene.points, rows)
    assert scene.meta["dropped"] == 0


def test_bin5_nan_point_dropped(tmp_path):
    rows = np.array([[0, 0, 0, 1, 0], [np.nan, 1, 1, 0.5, 0.1]], dtype="<f4")
    path = tmp_path / "nan.bin5"
    path.write_bytes(rows.tobytes())
    scene = load_points(path)
    assert scene.n_points == 1
    assert scene.meta["dropped"] == 1


def test_bin5_truncated_record_rejected(tmp_path):
    path = tmp_path / "short.bin5"
    path.write_bytes(np.zeros(7, dtype="<f4").tobytes())
    with pytest.raises(PointCloudError, match="truncated"):
        load_points(path)


def test_bin5_empty_scene_zero_length_file(tmp_path):
    path = tmp_path / "empty.bin5"
    save_points(Scene(points=np.zeros((0, 5))), path)
    assert path.stat().st_size == 0
    assert load_points(path).n_points == 0


def test_bin5_single_point_roundtrip(tmp_path):
    rows = _f32([[1.5, -2.25, 0.125, 17.0, 0.25]])
    path = tmp_path / "one.bin5"
    save_points(Scene(points=rows), path)
    assert np.array_equal(load_points(path).points, rows)


def test_bin5_large_random_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    rows = _f32(
        np.column_stack(
            [
                rng.uniform(-54, 54, 10_000),
                rng.uniform(-54, 54, 10_000),
                rng.uniform(-5, 3, 10_000),
                rng.uniform(0, 255, 10_000),
                rng.uniform(0, 0.5, 10_000),
            ]
        )
    )
    path = tmp_path / "big.bin5"
    save_points(Scene(points=rows), path)
    assert np.array_equal(load_points(path).points, rows)


def test_missing_file_raises(tmp_path):
    with pytest.raises(PointCloudError, match="cannot read"):
        load_points(tmp_path / "nowhere.bin5")


# ---------------------------------------------------------------------------
# csv format


def test_csv_roundtrip(tmp_path):
    rows = np.array([[1.25, -2.0, 0.5, 33.0, 0.1], [0.0, 0.0, 0.0, 0.0, 0.0]])
    path = tmp_path / "pts.csv"
    save_points(Scene(points=rows), path)
    scene = load_points(path)
    assert np.array_equal(scene.points, rows)


def test_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c,d,e\n1,2,3,4,0\n")
    with pytest.raises(PointCloudError, match=r":1:"):
        load_points(path)


def test_csv_bad_field_count_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x,y,z,r,dt\n1,2,3,4,0\n1,2,3\n")
    with pytest.raises(PointCloudError, match=r":3:"):
        load_points(path)


def test_csv_unparsable_value_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x,y,z,r,dt\n1,2,3,4,zap\n")
    with pytest.raises(PointCloudError, match=r":2:"):
        load_points(path)


# ---------------------------------------------------------------------------
# validation


def test_validate_drops_nonfinite_and_bad_dt():
    pts = np.array(
        [
            [0, 0, 0, 1, 0.0],
            [0, 0, 0, 1, 0.5],      # dt at the window edge: out
            [0, 0, 0, 1, -0.01],    # negative dt: out
            [np.inf, 0, 0, 1, 0.1],
            [0, 0, 0, 1, 0.49],
        ]
    )
    clean, dropped = validate_points(pts)
    assert dropped == 3
    assert np.array_equal(clean[:, 4], [0.0, 0.49])


def test_validate_preserves_row_order():
    rng = np.random.default_rng(3)
    pts = np.column_stack([rng.normal(size=(50, 4)), rng.uniform(0, TIME_WINDOW, 50)])
    clean, dropped = validate_points(pts)
    assert dropped == 0
    assert np.array_equal(clean, pts)


# ---------------------------------------------------------------------------
# sidecar metadata


def test_sidecar_roundtrip(tmp_path):
    scene = gen_scene(5, n_boxes=2, points_per_box=10, background_points=5, sweeps=2)
    path = tmp_path / "scene.bin5"
    save_points(scene, path)
    assert sidecar_path(path).exists()
    back = load_points(path)
    assert back.meta["seed"] == 5
    assert len(back.boxes) == 2
    assert back.boxes[0] == scene.boxes[0]


# ---------------------------------------------------------------------------
# synthetic scenes


def test_gen_scene_background_only():
    scene = gen_scene(1, n_boxes=0, points_per_box=0, background_points=100, sweeps=1)
    assert scene.n_points == 100
    assert scene.boxes == []
    assert np.all(scene.points[:, 4] == 0.0)


def test_gen_scene_deterministic():
    a = gen_scene(1, n_boxes=3, points_per_box=50, background_points=100, sweeps=3)
    b = gen_scene(1, n_boxes=3, points_per_box=50, background_points=100, sweeps=3)
    assert np.array_equal(a.points, b.points)
    assert a.boxes == b.boxes


def test_gen_scene_foreground_inside_boxes():
    per_box = 200
    scene = gen_scene(9, n_boxes=4, points_per_box=per_box, background_points=0, sweeps=2)
    for k, box in enumerate(scene.boxes):
        chunk = scene.points[k * per_box : (k + 1) * per_box]
        assert point_in_box_bev(chunk[:, 0], chunk[:, 1], box).all()
        assert np.all(np.abs(chunk[:, 2] - box.cz) <= 0.5 * box.h)


def test_gen_scene_dt_within_sweep_bins():
    sweeps = 5
    scene = gen_scene(2, n_boxes=1, points_per_box=100, background_points=100, sweeps=sweeps)
    dt = scene.points[:, 4]
    assert np.all((dt >= 0.0) & (dt < TIME_WINDOW))
    bin_width = TIME_WINDOW / sweeps
    # jitter stays below half a bin, so sweep index recovery is unambiguous
    assert np.all(dt % bin_width < 0.5 * bin_width + 1e-9)


def test_gen_scene_rejects_bad_counts():
    with pytest.raises(ValueError):
        gen_scene(0, n_boxes=-1, points_per_box=0, background_points=0)
    with pytest.raises(ValueError):
        gen_scene(0, n_boxes=0, points_per_box=0, background_points=0, sweeps=0)


def test_gen_scene_float32_exact():
    scene = gen_scene(4, n_boxes=1, points_per_box=20, background_points=20, sweeps=2)
    assert np.array_equal(scene.points, scene.points.astype(np.float32).astype(np.float64))


# ---------------------------------------------------------------------------
# box / scene types


def test_box_requires_positive_sizes():
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, l=0.0, w=1, h=1, yaw=0)


def test_box_yaw_wrapped():
    box = Box3D(0, 0, 0, 1, 1, 1, yaw=3 * math.pi)
    assert -math.pi <= box.yaw < math.pi
    assert box.yaw == pytest.approx(math.pi if box.yaw > 0 else -math.pi)


def test_wrap_angle_range():
    for angle in np.linspace(-10, 10, 101):
        wrapped = wrap_angle(angle)
        assert -math.pi <= wrapped < math.pi
        assert math.isclose(
            math.cos(wrapped), math.cos(angle), abs_tol=1e-12
        ) and math.isclose(math.sin(wrapped), math.sin(angle), abs_tol=1e-12)


def test_box_dict_roundtrip():
    box = Box3D(1, 2, 3, 4, 5, 6, yaw=0.5, class_id=7)
    assert Box3D.from_dict(box.to_dict()) == box


def test_box_corners_bev_axis_aligned():
    box = Box3D(1.0, 2.0, 0.0, l=4.0, w=2.0, h=1.0, yaw=0.0)
    corners = box.corners_bev()
    assert corners.shape == (4, 2)
    assert np.allclose(sorted(corners[:, 0]), [-1, -1, 3, 3])
    assert np.allclose(sorted(corners[:, 1]), [1, 1, 3, 3])


def test_scene_rejects_bad_shape():
    with pytest.raises(ValueError, match="points must be"):
        Scene(points=np.zeros((3, 4)))
