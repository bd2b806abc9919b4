import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semloc import scene_sim as ss
from semloc import voxel_map as vm
from semloc.geometry import Pose, camera_pose, rot_z

VS = 0.3


def one_pixel_frame(position, yaw, depth, label):
    intr = ss.CameraIntrinsics(width=1, height=1, fx=1.0, fy=1.0, cx=0.5, cy=0.5, max_range=100.0)
    return ss.SensorFrame(np.array([[depth]]), np.array([[label]], np.uint16), camera_pose(position, yaw), intr)


def sparse_map(cells, labels, n_labels=8):
    return vm.SemanticVoxelMap(VS, np.zeros(3), np.array(cells).reshape(-1, 3), np.array(labels, np.uint8), n_labels)


def as_dict(smap):
    return {tuple(i): int(s) for i, s in zip(smap.indices, smap.states)}


# --------------------------------------------------------------------------- fusion


def test_single_ray():
    f = one_pixel_frame([0.15, 0.15, 0.15], 0.0, 3 * VS, 2)
    votes = vm.frame_votes(f, VS, 8)
    got = {tuple(i): tuple(c) for i, c in zip(vm.unpack_keys(votes.keys), votes.counts)}
    assert set(got) == {(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0)}
    for x in range(3):
        assert got[(x, 0, 0)][0] == 1 and sum(got[(x, 0, 0)][1:]) == 0
    assert got[(3, 0, 0)][2] == 1 and got[(3, 0, 0)][0] == 0
    m = votes.resolve()
    assert as_dict(m) == {(0, 0, 0): 0, (1, 0, 0): 0, (2, 0, 0): 0, (3, 0, 0): 2}


def test_no_finite_depth_gives_empty_map():
    f = one_pixel_frame([0, 0, 1], 0.0, np.nan, 0)
    assert len(vm.fuse([f, f], VS)) == 0


def test_empty_frame_list_rejected():
    with pytest.raises(ValueError):
        vm.fuse([], VS)


def test_label_majority():
    frames = [one_pixel_frame([0.15, 0.15, 0.15], 0.0, 3 * VS, lab) for lab in (2, 2, 5)]
    assert as_dict(vm.fuse(frames, VS))[(3, 0, 0)] == 2


def test_tie_between_free_and_occupied_resolves_occupied():
    hit = one_pixel_frame([0.15, 0.15, 0.15], 0.0, 3 * VS, 4)
    through = one_pixel_frame([0.15, 0.15, 0.15], 0.0, 5 * VS, 1)
    m = vm.fuse([hit, through], VS)
    assert as_dict(m)[(3, 0, 0)] == 4


def test_min_hits_leaves_weak_voxels_unobserved():
    f = one_pixel_frame([0.15, 0.15, 0.15], 0.0, 3 * VS, 2)
    assert len(vm.fuse([f], VS, min_hits=2)) == 0
    assert len(vm.fuse([f, f], VS, min_hits=2)) == 4


def test_merge_matches_joint_fusion(loop_frames):
    frames = loop_frames[:5]
    joint = vm.fuse(frames, VS)
    merged = vm.frame_votes(frames[0], VS, 8)
    for f in frames[1:]:
        merged = merged.merge(vm.frame_votes(f, VS, 8))
    assert as_dict(joint) == as_dict(merged.resolve())


@settings(max_examples=5, deadline=None)
@given(st.permutations(list(range(6))))
def test_fusion_order_independent(loop_frames, order):
    frames = loop_frames[:6]
    assert as_dict(vm.fuse([frames[i] for i in order], VS)) == as_dict(vm.fuse(frames, VS))


def test_states_partition(loop_map):
    keys = vm.pack_keys(loop_map.indices)
    assert np.unique(keys).size == len(loop_map)
    assert loop_map.states.max() <= 8


def test_no_occupied_voxel_in_front_of_wall():
    wall = ss.Box(ss.WALL, (2.0, -100.0, -1.0), (3.0, 100.0, 100.0))
    world = ss.GroundTruthWorld((-200, -200, -1, 200, 200, 120), (wall,), (), ss.GROUND, 8, 0)
    f = ss.render_view(world, camera_pose([0.0, 0.0, 1.5], 0.0))
    m = vm.fuse([f], VS)
    idx, lab = m.occupied()
    wall_cells = lab == ss.WALL
    assert wall_cells.any()
    assert np.all(idx[wall_cells, 0] == int(np.floor(2.0 / VS)))
    # everything else is ground, hit from above
    assert np.all(lab[~wall_cells] == ss.GROUND)
    assert np.all(idx[~wall_cells, 2] == -1)


def test_body_frame_fusion_puts_camera_at_origin(loop_frames):
    f = loop_frames[3]
    m = vm.fuse_in_body_frame([f], f.pose, VS, 8)
    idx, _ = m.occupied()
    c = m.voxel_centers(idx)
    # the camera looks along +x in its own body frame
    assert np.median(c[:, 0]) > 0
    assert abs(np.median(c[:, 1])) < np.median(c[:, 0])


# --------------------------------------------------------------------------- subvolumes


def test_extract_yaw_zero_is_copy(loop_map):
    idx, _ = loop_map.occupied()
    center = loop_map.origin + idx[len(idx) // 2] * VS  # a voxel corner
    V = 8
    got = vm.extract_subvolume(loop_map, center, 0.0, V).grid
    base = idx[len(idx) // 2] - V // 2
    want = np.zeros((V, V, V), np.uint8)
    lookup = {tuple(i): int(s) + 1 for i, s in zip(loop_map.indices, loop_map.states)}
    for i, j, k in itertools.product(range(V), repeat=3):
        want[i, j, k] = lookup.get(tuple(base + (i, j, k)), 0)
    assert np.array_equal(got, want)


def test_extract_periodic(loop_map):
    c = loop_map.voxel_centers(loop_map.occupied()[0][:3])
    assert np.array_equal(vm.extract_subvolumes(loop_map, c, 2 * np.pi, 8), vm.extract_subvolumes(loop_map, c, 0.0, 8))


def test_extract_quarter_turn_single_voxel():
    # occupied voxel with center offset (0.45, -0.15, 0.15) from the corner at the origin
    m = sparse_map([(1, -1, 0)], [3])
    V = 4
    g0 = vm.extract_subvolume(m, np.zeros(3), 0.0, V).grid
    assert np.argwhere(g0 == 4).tolist() == [[3, 1, 2]]
    # content turns by +90 degrees: offset becomes (0.15, 0.45, 0.15)
    g90 = vm.extract_subvolume(m, np.zeros(3), np.pi / 2, V).grid
    assert np.argwhere(g90 == 4).tolist() == [[2, 3, 2]]


def test_extract_outside_map_is_unobserved():
    m = sparse_map([(0, 0, 0)], [1])
    g = vm.extract_subvolume(m, np.array([30.0, 30.0, 30.0]), 0.7, 4).grid
    assert not g.any()


def test_non_power_of_two_rejected(loop_map):
    with pytest.raises(ValueError):
        vm.extract_subvolume(loop_map, np.zeros(3), 0.0, 6)


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.tuples(st.integers(-4, 3), st.integers(-4, 3), st.integers(-4, 3)), min_size=1, max_size=30, unique=True),
    st.integers(0, 3),
    st.integers(1, 8),
)
def test_extract_rotation_composition(cells, quarter, label):
    m = sparse_map(cells, [label] * len(cells))
    a = quarter * np.pi / 2
    center = np.zeros(3)
    turned = m.transformed(Pose(rot_z(a), center - rot_z(a) @ center))
    assert np.array_equal(vm.extract_subvolume(m, center, a, 8).grid, vm.extract_subvolume(turned, center, 0.0, 8).grid)


def brute_centers(smap, V, stride):
    occ, _ = smap.occupied()
    h = V // 2
    lo = (occ.min(0) - V) // stride - 1
    hi = (occ.max(0) + V) // stride + 1
    out = []
    for m in itertools.product(*[range(a, b + 1) for a, b in zip(lo, hi)]):
        m = np.array(m)
        w0 = m * stride - h
        inside = np.all((occ >= w0) & (occ < w0 + V), axis=1)
        if inside.any():
            out.append(m)
    return smap.origin + np.array(out).reshape(-1, 3) * stride * smap.voxel_size


def test_single_voxel_center_count():
    m = sparse_map([(2, -3, 5)], [1])
    for V in (2, 4, 8):
        c = vm.occupied_subvolume_centers(m, V, 1)
        assert len(c) == V**3
        np.testing.assert_allclose(c, brute_centers(m, V, 1))


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.tuples(st.integers(-6, 6), st.integers(-6, 6), st.integers(-3, 3)), min_size=1, max_size=12, unique=True),
    st.sampled_from([1, 2, 3, 4]),
    st.sampled_from([2, 4, 8]),
)
def test_centers_match_window_scan(cells, stride, V):
    m = sparse_map(cells, [1] * len(cells))
    np.testing.assert_allclose(vm.occupied_subvolume_centers(m, V, stride), brute_centers(m, V, stride))


def test_all_free_map_has_no_centers():
    m = sparse_map([(0, 0, 0), (1, 0, 0)], [0, 0])
    assert vm.occupied_subvolume_centers(m, 4, 1).shape == (0, 3)


def test_dense_tiling_count():
    V, E = 4, 10
    cells = np.array(list(itertools.product(range(E), repeat=3))) - V // 2
    m = sparse_map(cells, np.ones(len(cells)))
    assert len(vm.occupied_subvolume_centers(m, V, V)) == int(np.ceil(E / V)) ** 3


def test_centers_sorted(loop_map):
    c = vm.occupied_subvolume_centers(loop_map, 16, 4)
    lattice = np.round((c - loop_map.origin) / (4 * VS)).astype(int)
    assert np.all(np.lexsort(lattice.T[::-1]) == np.arange(len(c)))


# --------------------------------------------------------------------------- training pairs


def test_duplicated_frame_pairs_are_identical(loop_frames):
    f = loop_frames[2]
    inc, com = vm.training_pairs([f, f], VS, 8, 30, seed=1)
    assert np.array_equal(inc, com)


def test_complete_never_less_observed(small_pairs):
    inc, com = small_pairs
    assert np.all((com > 0).sum(axis=(1, 2, 3)) >= (inc > 0).sum(axis=(1, 2, 3)))
    assert np.all(com[inc > 0] > 0)


def test_pairs_deterministic(loop_frames):
    a = vm.training_pairs(loop_frames[:4], VS, 8, 20, seed=9)
    b = vm.training_pairs(loop_frames[:4], VS, 8, 20, seed=9)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_pairs_need_observations():
    f = one_pixel_frame([0, 0, 1], 0.0, np.nan, 0)
    with pytest.raises(ValueError):
        vm.training_pairs([f, f], VS, 8, 5, seed=0)
    with pytest.raises(ValueError):
        vm.training_pairs([f], VS, 8, 5, seed=0)


# --------------------------------------------------------------------------- files


def test_map_round_trip(tmp_path, loop_map):
    p = tmp_path / "m.svlm"
    vm.save_map(loop_map, p)
    back = vm.load_map(p)
    assert back.voxel_size == loop_map.voxel_size
    assert np.array_equal(back.indices, loop_map.indices) and np.array_equal(back.states, loop_map.states)
    assert p.read_bytes()[:4] == b"SVLM"
    assert p.stat().st_size == 48 + 13 * len(loop_map)


def test_map_corruption(tmp_path, loop_map):
    p = tmp_path / "m.svlm"
    vm.save_map(loop_map, p)
    data = p.read_bytes()
    p.write_bytes(data[:-3])
    with pytest.raises(ValueError):
        vm.load_map(p)
    p.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        vm.load_map(p)


def test_subvolume_file_x_fastest(tmp_path):
    g = np.zeros((2, 4, 4, 4), np.uint8)
    g[0, 1, 0, 0] = 7
    g[1, 0, 2, 0] = 9
    p = tmp_path / "s.svlv"
    vm.save_subvolumes(g, p)
    raw = p.read_bytes()
    assert raw[:4] == b"SVLV" and raw[12 + 1] == 7 and raw[12 + 64 + 2 * 4] == 9
    assert np.array_equal(vm.load_subvolumes(p), g)
