import numpy as np
import pytest

from envs.encoding import EncodingSpec
from envs.gridnav import EpisodeResult, GridNavEnv
from envs.layouts import GridLayout, Heading
from loss.advantage import Trajectory, Transition
from utils.config import TrainerConfig


def open_grid(rows=5, cols=5, goal=(4, 4), start=(0, 0), heading=Heading.E, walls=()):
    occupancy = np.zeros((rows, cols), dtype=bool)
    for cell in walls:
        occupancy[cell] = True
    return GridLayout(occupancy, frozenset([goal]), start, heading)


def synthetic_trajectory(rewards, trajectory_id, policy_version=0):
    transitions = tuple(Transition(None, 0, 0.0, float(r), t) for t, r in enumerate(rewards, start=1))
    result = EpisodeResult(False, 0, 0, 0.0, len(rewards))
    return Trajectory(transitions, result, trajectory_id, policy_version)


def random_buffer(rng, max_b=8, max_len=50, min_b=2):
    b = int(rng.integers(min_b, max_b + 1))
    return [synthetic_trajectory(rng.normal(size=int(rng.integers(1, max_len + 1))), i) for i in range(b)]


@pytest.fixture
def open_layout():
    return open_grid()


@pytest.fixture
def env():
    return GridNavEnv()


@pytest.fixture
def spec():
    return EncodingSpec()


@pytest.fixture
def small_config():
    return TrainerConfig(t_max=60, group_size=4, retention=16, rl_iterations=2, eval_every=1,
                         il_epochs=3, il_demos=8, demo_pool=8, il_batch_size=16, train_layouts=6,
                         eval_layouts=4, eval_per_bucket=0, layout_size=[7, 9], eval_layout_size=[7, 9],
                         progress=False)
