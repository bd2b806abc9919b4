import numpy as np
import pytest

from semloc import completion_net as cn
from semloc import semantic_words as sw
from semloc.geometry import Pose, rot_z
from semloc.voxel_map import SemanticVoxelMap, extract_subvolumes, fuse, occupied_subvolume_centers


@pytest.fixture(scope="module")
def bag(loop_map, quick_net):
    return sw.bag_of_words(loop_map, quick_net, 16, 4, map_id="db")


def cosine(a, b):
    return (a * b).sum(1) / np.linalg.norm(a, axis=1) / np.linalg.norm(b, axis=1)


def test_orientation_set():
    o = sw.default_orientations(18)
    assert len(o) == 18 and o[0] == 0.0
    np.testing.assert_allclose(np.degrees(o), np.arange(0, 360, 20))
    assert np.all(np.diff(o) > 0) and o[-1] < 2 * np.pi


def test_empty_map_gives_empty_bag(quick_net):
    empty = SemanticVoxelMap(0.3, np.zeros(3), np.empty((0, 3)), np.empty(0), 8)
    b = sw.bag_of_words(empty, quick_net, 16, 4)
    assert len(b) == 0 and b.descriptors.shape == (0, 32)


def test_one_word_per_center(loop_map, bag):
    centers = occupied_subvolume_centers(loop_map, 16, 4)
    assert len(bag) == len(centers)
    np.testing.assert_array_equal(bag.centers, centers)
    assert np.all(bag.yaws == 0) and np.isfinite(bag.descriptors).all()
    assert bag[3].map_id == "db"


def test_bag_deterministic(loop_map, quick_net, bag):
    again = sw.bag_of_words(loop_map, quick_net, 16, 4)
    assert np.array_equal(again.descriptors, bag.descriptors)


def test_encoder_side_must_match(loop_map, quick_net):
    with pytest.raises(ValueError):
        sw.bag_of_words(loop_map, quick_net, 8, 4)
    with pytest.raises(ValueError):
        sw.oriented_bags(loop_map, quick_net, 16, 4, [])


def test_single_orientation_equals_plain_bag(loop_map, quick_net, bag):
    (only,) = sw.oriented_bags(loop_map, quick_net, 16, 4, [0.0])
    assert np.array_equal(only.descriptors, bag.descriptors)
    assert np.all(only.yaws == 0.0)


def test_oriented_bag_sizes(loop_frames, quick_net):
    small = fuse(loop_frames[:2], 0.3)
    n = len(occupied_subvolume_centers(small, 16, 8))
    bags = sw.oriented_bags(small, quick_net, 16, 8, sw.default_orientations(18))
    assert len(bags) == 18
    assert sum(len(b) for b in bags) == 18 * n
    for b, yaw in zip(bags, sw.default_orientations(18)):
        assert np.all(b.yaws == yaw)


def test_rotated_world_matches_counter_rotated_query(loop_frames, loop_map, quick_net):
    a = np.radians(20)
    c0 = loop_map.voxel_centers(loop_map.occupied()[0]).mean(0)
    turn = Pose(rot_z(a), c0 - rot_z(a) @ c0)
    turned = fuse(loop_frames, 0.3, to_map=turn)
    centers = occupied_subvolume_centers(loop_map, 16, 4)[::7]
    d0 = cn.encode(quick_net, extract_subvolumes(loop_map, centers, 0.0, 16)).mu
    d1 = cn.encode(quick_net, extract_subvolumes(turned, turn.apply(centers), -a, 16)).mu
    assert np.median(cosine(d0, d1)) > 0.95
    # control: same content, wrong correspondence
    assert np.median(cosine(d0, np.roll(d1, 1, axis=0))) < np.median(cosine(d0, d1))


def test_descriptor_depends_only_on_its_window(loop_map, quick_net, bag):
    i = len(bag) // 2
    c = bag.centers[i]
    h = 8 * loop_map.voxel_size
    pts = loop_map.voxel_centers(loop_map.indices)
    inside = np.all(np.abs(pts - c) < h, axis=1)
    cropped = SemanticVoxelMap(loop_map.voxel_size, loop_map.origin, loop_map.indices[inside], loop_map.states[inside], 8)
    full = extract_subvolumes(loop_map, c[None], 0.0, 16)
    crop = extract_subvolumes(cropped, c[None], 0.0, 16)
    assert np.array_equal(full, crop)
    assert np.array_equal(cn.encode(quick_net, crop).mu, cn.encode(quick_net, full).mu)


def test_word_file_round_trip(tmp_path, bag):
    p = tmp_path / "w.svlw"
    sw.save_words(bag, p)
    back = sw.load_words(p)
    assert np.array_equal(back.descriptors, bag.descriptors)
    assert np.array_equal(back.centers, bag.centers) and np.array_equal(back.yaws, bag.yaws)
    raw = p.read_bytes()
    assert raw[:4] == b"SVLW" and len(raw) == 20 + len(bag) * (4 * 32 + 32)
    p.write_bytes(raw[:-1])
    with pytest.raises(ValueError):
        sw.load_words(p)


def test_concat_keeps_order(bag):
    a = sw.WordBag(bag.descriptors[:3], bag.centers[:3], bag.yaws[:3])
    b = sw.WordBag(bag.descriptors[3:5], bag.centers[3:5], bag.yaws[3:5])
    both = sw.WordBag.concat([a, b])
    assert np.array_equal(both.descriptors, bag.descriptors[:5])
