import numpy as np
import pytest

from semloc import completion_net as cn
from semloc.scene_sim import TrajectoryParams, desk_world_spec, generate_trajectory, generate_world, render_view
from semloc.voxel_map import fuse, training_pairs


@pytest.fixture(scope="session")
def loop_world():
    return generate_world(desk_world_spec("loop"), 1)


@pytest.fixture(scope="session")
def loop_frames(loop_world):
    traj = generate_trajectory(loop_world, "Loop0", TrajectoryParams())
    return [render_view(loop_world, p, frame_id=i) for i, p in enumerate(traj.database[:12])]


@pytest.fixture(scope="session")
def loop_map(loop_frames):
    return fuse(loop_frames, 0.3)


@pytest.fixture(scope="session")
def small_pairs(loop_frames):
    return training_pairs(loop_frames, 0.3, 16, 400, seed=3)


@pytest.fixture(scope="session")
def quick_net(small_pairs):
    """A desk-architecture net trained briefly; enough structure for descriptor tests."""
    inc, com = small_pairs
    net, _ = cn.train(inc, com, cn.NetArchitecture(), cn.TrainConfig(epochs=3, seed=0))
    return net
