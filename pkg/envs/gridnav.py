""" Deterministic grid object-navigation environment """
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from utils.errors import ConfigError, DomainError, UsageError
from .layouts import UNREACHABLE, Heading, geodesic_field

# egocentric view classes; object classes follow from N_FIXED_CLASSES on
OUTSIDE, WALL, FREE = 0, 1, 2
N_FIXED_CLASSES = 3


class NavAction(IntEnum):
    MOVE_FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STOP = 3


N_ACTIONS = len(NavAction)


@dataclass(frozen=True)
class AgentPose:
    cell: tuple
    heading: Heading


@dataclass(frozen=True, eq=False)
class Observation:
    """Egocentric k x k view; row 0 is farthest ahead, the agent sits at the centre"""
    classes: np.ndarray
    offsets: np.ndarray
    heading: Heading

    def __eq__(self, other):
        return (isinstance(other, Observation) and self.heading == other.heading
                and np.array_equal(self.classes, other.classes)
                and np.array_equal(self.offsets, other.offsets))


@dataclass(frozen=True)
class StepOutcome:
    observation: Observation
    reward: float
    done: bool
    info: dict


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    path_length: int
    optimal_length: int
    spl: float
    steps_taken: int


def compute_spl(success, optimal_length, path_length):
    if optimal_length < 0 or path_length < 0:
        raise DomainError(f'path lengths must be non-negative, got optimal={optimal_length} path={path_length}')
    if not success:
        return 0.0
    if optimal_length == 0:
        return 1.0
    return min(1.0, optimal_length / max(path_length, optimal_length))


def geodesic_distance(layout, cell, field=None):
    """Shortest 4-connected path length to the nearest goal, None when unreachable"""
    cell = tuple(cell)
    if layout.blocked(cell):
        raise DomainError(f'geodesic query from blocked cell {cell}')
    if field is None:
        field = geodesic_field(layout)
    d = int(field[cell])
    return None if d == UNREACHABLE else d


class GridNavEnv:
    def __init__(self, t_max=200, success_radius=1, slack_penalty=0.01, terminal_scale=2.5,
                 reward_mode='dense', view_size=5):
        if reward_mode not in ('dense', 'sparse'):
            raise ConfigError(f'unknown reward mode {reward_mode!r}')
        if view_size < 1 or view_size % 2 == 0:
            raise ConfigError(f'view size must be odd and positive, got {view_size}')
        self.t_max = t_max
        self.success_radius = success_radius
        self.slack_penalty = slack_penalty
        self.terminal_scale = terminal_scale
        self.reward_mode = reward_mode
        self.view_size = view_size

        self.layout = None
        self.seed = None
        self.field = None
        self.pose = None
        self.steps = 0
        self.path_length = 0
        self.done = False
        self.result = None

    @classmethod
    def from_config(cls, config):
        return cls(t_max=config.t_max, success_radius=config.success_radius,
                   slack_penalty=config.slack_penalty, terminal_scale=config.terminal_scale,
                   reward_mode=config.reward_mode, view_size=config.view_size)

    def reset(self, layout, seed=0):
        field = geodesic_field(layout)
        if field[layout.start_cell] == UNREACHABLE:
            raise ConfigError(f'no goal reachable from start {layout.start_cell}')
        self.layout = layout
        self.seed = seed
        self.field = field
        self.pose = AgentPose(layout.start_cell, layout.start_heading)
        self.steps = 0
        self.path_length = 0
        self.done = False
        self.result = None
        return self.pose, self.observe()

    @property
    def optimal_length(self):
        return int(self.field[self.layout.start_cell])

    def geodesic(self, cell=None):
        return int(self.field[self.pose.cell if cell is None else cell])

    def observe(self):
        k = self.view_size
        h = k // 2
        (r0, c0), heading = self.pose.cell, self.pose.heading
        fr, fc = heading.forward
        rr, rc = heading.right
        sr, sc = self.layout.start_cell
        classes = np.empty((k, k), dtype=np.int64)
        offsets = np.empty((k, k, 2), dtype=np.int64)
        for i in range(k):
            ahead = h - i
            for j in range(k):
                right = j - h
                cell = (r0 + ahead * fr + right * rr, c0 + ahead * fc + right * rc)
                offsets[i, j] = (cell[0] - sr, cell[1] - sc)
                if not self.layout.inside(cell):
                    classes[i, j] = OUTSIDE
                elif self.layout.occupancy[cell]:
                    classes[i, j] = WALL
                else:
                    obj = self.layout.object_class(cell)
                    classes[i, j] = FREE if obj is None else N_FIXED_CLASSES + obj
        return Observation(classes, offsets, heading)

    def step(self, action):
        if self.layout is None:
            raise UsageError('step before reset')
        if self.done:
            raise UsageError('step after the episode is done')
        action = NavAction(action)
        before = self.geodesic()
        cell, heading = self.pose.cell, self.pose.heading
        collided = False

        if action == NavAction.MOVE_FORWARD:
            fr, fc = heading.forward
            nxt = (cell[0] + fr, cell[1] + fc)
            if self.layout.blocked(nxt):
                collided = True
            else:
                cell = nxt
                self.path_length += 1
        elif action == NavAction.TURN_LEFT:
            heading = Heading((heading - 1) % 4)
        elif action == NavAction.TURN_RIGHT:
            heading = Heading((heading + 1) % 4)

        self.pose = AgentPose(cell, heading)
        self.steps += 1
        after = self.geodesic()

        stopped = action == NavAction.STOP
        self.done = stopped or self.steps >= self.t_max
        success = stopped and after <= self.success_radius

        if self.reward_mode == 'dense':
            reward = -(after - before) - self.slack_penalty
        else:
            reward = 0.0
        if self.done:
            spl = compute_spl(success, self.optimal_length, self.path_length)
            self.result = EpisodeResult(success, self.path_length, self.optimal_length, spl, self.steps)
            reward += self.terminal_scale * spl if self.reward_mode == 'dense' else float(success)

        info = {'geodesic_before': before, 'geodesic_after': after, 'collided': collided,
                'progress': before - after}
        return StepOutcome(self.observe(), float(reward), self.done, info)
