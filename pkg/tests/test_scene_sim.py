import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semloc import scene_sim as ss
from semloc.geometry import camera_pose


def on_surface(world, p, tol=1e-4):
    """Distance-free oracle: is p on the ground plane or on the boundary of some solid?"""
    if abs(p[2]) < tol:
        return True
    for b in world.boxes:
        lo, hi = np.array(b.lo), np.array(b.hi)
        inside = np.all(p >= lo - tol) and np.all(p <= hi + tol)
        if inside and (np.any(np.abs(p - lo) < tol) or np.any(np.abs(p - hi) < tol)):
            return True
    for c in world.cylinders:
        r = np.hypot(p[0] - c.center[0], p[1] - c.center[1])
        if c.z0 - tol <= p[2] <= c.z1 + tol:
            if abs(r - c.radius) < tol:
                return True
            if r <= c.radius + tol and (abs(p[2] - c.z0) < tol or abs(p[2] - c.z1) < tol):
                return True
    return False


def wall_world(x=2.0, label=ss.WALL):
    wall = ss.Box(label, (x, -100.0, -1.0), (x + 1.0, 100.0, 100.0))
    return ss.GroundTruthWorld((-200, -200, -1, 200, 200, 120), (wall,), (), ss.GROUND, 8, 0)


def test_empty_spec_only_ground():
    w = ss.generate_world(ss.WorldSpec(), 3)
    assert w.boxes == () and w.cylinders == ()
    f = ss.render_view(w, camera_pose([0, 0, 1.5], 0.0))
    fin = np.isfinite(f.depth)
    assert fin.any() and np.all(f.labels[fin] == ss.GROUND)


def test_world_determinism():
    spec = ss.desk_world_spec("cross")
    assert ss.generate_world(spec, 11).to_json() == ss.generate_world(spec, 11).to_json()
    assert ss.generate_world(spec, 11).to_json() != ss.generate_world(spec, 12).to_json()


def test_twenty_boxes_inside_extent():
    spec = ss.WorldSpec(objects=(ss.ObjectGroup("box", ss.BUILDING, (20, 20), (1, 3), (1, 3), (1, 5)),))
    w = ss.generate_world(spec, 7)
    assert len(w.boxes) == 20
    x0, y0, z0, x1, y1, z1 = spec.extent
    for b in w.boxes:
        assert x0 <= b.lo[0] and y0 <= b.lo[1] and z0 <= b.lo[2]
        assert b.hi[0] <= x1 and b.hi[1] <= y1 and b.hi[2] <= z1


def test_desk_world_has_every_label():
    w = ss.generate_world(ss.desk_world_spec("loop"), 5)
    labels = {o.label for o in w.objects} | {w.ground_label}
    assert labels == set(range(1, 9))


def test_infeasible_spec_raises():
    spec = ss.WorldSpec(extent=(-3, -3, -1, 3, 3, 5),
                        objects=(ss.ObjectGroup("box", ss.BUILDING, (10, 10), (4, 5), (4, 5), (1, 2)),))
    with pytest.raises(ss.GenerationError):
        ss.generate_world(spec, 0, max_attempts=50)


def test_world_json_round_trip(tmp_path):
    w = ss.generate_world(ss.desk_world_spec("loop"), 2)
    assert ss.GroundTruthWorld.from_dict(__import__("json").loads(w.to_json())) == w
    spec = ss.desk_world_spec("cross")
    ss.save_world_spec(spec, tmp_path / "s.json")
    assert ss.load_world_spec(tmp_path / "s.json") == spec


def test_frontal_wall_depth():
    f = ss.render_view(wall_world(2.0), camera_pose([0, 0, 1.5], 0.0))
    row = f.depth[f.depth.shape[0] // 2]
    assert np.allclose(row, 2.0, atol=1e-6)
    assert np.all(f.labels[np.isfinite(f.depth)] == ss.WALL)


def test_sky_is_nan():
    w = ss.GroundTruthWorld((-20, -20, -1, 20, 20, 10), (), (), ss.GROUND, 8, 0)
    f = ss.render_view(w, camera_pose([0, 0, 1.5], 0.0))
    top = f.depth[: f.depth.shape[0] // 2]
    assert np.all(np.isnan(top))
    assert np.all(f.labels[np.isnan(f.depth)] == 0)


def test_box_filling_view_matches_analytic_oracle():
    # box face at x = 1.5 spanning far beyond the frustum
    w = wall_world(1.5, label=3)
    cam = camera_pose([0, 0, 1.5], 0.0)
    f = ss.render_view(w, cam)
    rays = f.intrinsics.pixel_rays()
    dirs = rays @ cam.rotation.T
    t_oracle = (1.5 - 0.0) / dirs[:, 0]
    assert np.allclose(f.depth.ravel(), t_oracle, atol=1e-9)
    assert np.all(f.labels == 3)


def test_non_gravity_aligned_rejected():
    cam = camera_pose([0, 0, 1.5], 0.0)
    tilt = np.array([[1, 0, 0], [0, np.cos(0.2), -np.sin(0.2)], [0, np.sin(0.2), np.cos(0.2)]])
    with pytest.raises(ValueError):
        ss.render_view(wall_world(), ss.Pose(cam.rotation @ tilt, cam.translation))


def test_depth_consistency(loop_world, loop_frames):
    for f in loop_frames[:3]:
        pts, _ = f.points()
        for p in pts[::7]:
            assert on_surface(loop_world, p)
        fin = np.isfinite(f.depth)
        assert np.all(f.depth[fin] > 0) and np.all(f.depth[fin] <= f.intrinsics.max_range)
        assert np.all((f.labels > 0) == fin)


def test_render_determinism(loop_world):
    cam = camera_pose([0, -13.5, 1.5], 0.4)
    a, b = ss.render_view(loop_world, cam), ss.render_view(loop_world, cam)
    assert np.array_equal(a.depth, b.depth, equal_nan=True) and np.array_equal(a.labels, b.labels)


@pytest.mark.parametrize("scenario,layout,lo,hi", [
    ("Loop0", "loop", 0, 0), ("CrossTime", "loop", 0, 0), ("Loop90", "cross", 70, 110), ("Loop180", "cross", 160, 200),
])
def test_trajectory_viewpoint_constraint(scenario, layout, lo, hi):
    w = ss.generate_world(ss.desk_world_spec(layout), 4)
    tr = ss.generate_trajectory(w, scenario, ss.TrajectoryParams(reach=15))
    d = ss.nearest_yaw_differences(tr.database, tr.query)
    assert len(d) > 0
    # nearest_yaw_differences folds into [0, 180]
    assert np.all(d >= lo - 1e-6) and np.all(d <= min(hi, 180) + 1e-6)
    assert tr.label_noise == (scenario == "CrossTime")


def test_trajectory_leaving_world():
    w = ss.generate_world(ss.desk_world_spec("cross"), 4)
    with pytest.raises(ss.TrajectoryError):
        ss.generate_trajectory(w, "Loop90", ss.TrajectoryParams(reach=40))
    with pytest.raises(ss.TrajectoryError):
        ss.generate_trajectory(w, "Loop0")


def test_trajectory_json_round_trip(tmp_path, loop_world):
    tr = ss.generate_trajectory(loop_world, "Loop0")
    ss.save_trajectories(tr, tmp_path / "t.json")
    back = ss.load_trajectories(tmp_path / "t.json")
    assert back.scenario == "Loop0"
    assert all(np.array_equal(a.as_array(), b.as_array()) for a, b in zip(tr.database, back.database))


def _flip_frame(n_finite=100):
    depth = np.full((10, 12), np.nan)
    depth.ravel()[:n_finite] = 3.0
    labels = np.where(np.isfinite(depth), 2, 0).astype(np.uint16)
    return ss.SensorFrame(depth, labels, camera_pose([0, 0, 1], 0), ss.CameraIntrinsics(width=12, height=10, cx=6, cy=5))


def test_perturb_labels_zero_rate_identity():
    f = _flip_frame()
    g = ss.perturb_labels(f, 0.0, 1)
    assert np.array_equal(g.labels, f.labels)


def test_perturb_labels_exact_count_and_determinism():
    f = _flip_frame(100)
    g = ss.perturb_labels(f, 0.5, 9)
    changed = g.labels != f.labels
    assert changed.sum() == 50
    assert np.all(np.isfinite(f.depth[changed]))
    assert np.all((g.labels[changed] >= 1) & (g.labels[changed] <= 8))
    assert np.array_equal(ss.perturb_labels(f, 0.5, 9).labels, g.labels)
    assert np.array_equal(g.depth, f.depth, equal_nan=True)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 0.99), st.integers(0, 120))
def test_perturb_labels_count_property(rate, n):
    f = _flip_frame(n)
    g = ss.perturb_labels(f, rate, 0)
    assert (g.labels != f.labels).sum() == int(np.floor(rate * n))


def test_perturb_labels_rate_bounds():
    with pytest.raises(ValueError):
        ss.perturb_labels(_flip_frame(), 1.0, 0)


def test_frame_file_round_trip(tmp_path, loop_frames):
    f = loop_frames[0]
    ss.save_frame(f, tmp_path / "f.svlf")
    g = ss.load_frame(tmp_path / "f.svlf")
    assert np.allclose(g.depth, f.depth.astype(np.float32), equal_nan=True)
    assert np.array_equal(g.labels, f.labels)
    assert np.array_equal(g.pose.as_array(), f.pose.as_array())
    raw = (tmp_path / "f.svlf").read_bytes()
    (tmp_path / "bad.svlf").write_bytes(raw[:-5])
    with pytest.raises(ValueError):
        ss.load_frame(tmp_path / "bad.svlf")
    (tmp_path / "magic.svlf").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        ss.load_frame(tmp_path / "magic.svlf")


def test_perturb_world_changes_objects(loop_world):
    p = ss.perturb_world(loop_world, 0.3, 5, seed=2)
    assert p.objects != loop_world.objects
    assert sum(isinstance(o, ss.Cylinder) and o.label == ss.VEGETATION for o in p.objects) >= 5
