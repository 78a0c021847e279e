import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch.utils.data import Dataset

from envs.gridnav import NavAction
from policy.categorical import DTYPE
from .config import bucket_of
from .errors import DataError, NavError
from .rollout import ScriptedAgent, oracle_action, run_episode

SCAN_TURNS = 4


@dataclass(frozen=True, eq=False)
class Demonstration:
    layout: object
    action_sequence: tuple

    @property
    def length(self):
        return len(self.action_sequence)


def oracle_demonstration(env, layout, rng, scan_turn_prob=0.0, seed=0):
    """
    Shortest-path actions with seeded panoramic scans: before each step, with probability
    scan_turn_prob, four TURN_LEFTs rotate the agent once around in place.
    """
    env.reset(layout, seed)
    actions = []
    while not env.done:
        if scan_turn_prob > 0 and rng.random() < scan_turn_prob and env.steps + SCAN_TURNS < env.t_max:
            for _ in range(SCAN_TURNS):
                env.step(NavAction.TURN_LEFT)
                actions.append(NavAction.TURN_LEFT)
        action = oracle_action(env)
        env.step(action)
        actions.append(action)
    return Demonstration(layout, tuple(actions)), env.result


def generate_demonstrations(env, layouts, seed=0, scan_turn_prob=0.0):
    """One demonstration per layout; unsuccessful ones (over the step budget) are dropped"""
    rng = np.random.default_rng(seed)
    demos, dropped = [], 0
    for layout in layouts:
        demo, result = oracle_demonstration(env, layout, rng, scan_turn_prob, seed)
        if result.success:
            demos.append(demo)
        else:
            dropped += 1
    if dropped:
        logging.warning(f'Dropped {dropped} demonstrations longer than t_max={env.t_max}')
    return demos


def replay_demonstration(demo, env, spec, delta, index=None):
    """Teacher forcing: the demonstration's actions drive the env, whatever the policy would do"""
    try:
        traj = run_episode(env, demo.layout, ScriptedAgent(demo.action_sequence), spec, delta)
    except NavError as e:
        raise DataError(f'demonstration {index} failed to replay: {e}', index) from e
    if len(traj) != demo.length:
        raise DataError(f'demonstration {index} ended after {len(traj)} of {demo.length} actions', index)
    return traj


def curate_demonstrations(pool, strategy, target_count, buckets, rng):
    """
    Returns (demos, warned). random draws without replacement; uniform deals round-robin over
    length buckets so per-bucket counts differ by at most one, skipping exhausted buckets.
    """
    if not pool:
        raise DataError('cannot curate an empty demonstration pool')
    if target_count >= len(pool):
        if target_count > len(pool):
            logging.warning(f'Requested {target_count} demonstrations from a pool of {len(pool)}, taking all')
        return list(pool), target_count > len(pool)

    if strategy == 'random':
        idx = rng.permutation(len(pool))[:target_count]
        return [pool[i] for i in idx], False
    if strategy != 'uniform':
        raise DataError(f'unknown curation strategy {strategy!r}')

    per_bucket = [[] for _ in buckets]
    for i in rng.permutation(len(pool)):
        b = bucket_of(pool[i].length, buckets)
        if b is not None:
            per_bucket[b].append(pool[i])
    chosen = []
    while len(chosen) < target_count and any(per_bucket):
        for queue in per_bucket:
            if queue and len(chosen) < target_count:
                chosen.append(queue.pop(0))
    return chosen, False


class DemoDataset(Dataset):
    """Teacher-forced (features, action) pairs of every transition of every demonstration"""

    def __init__(self, demos, env, spec, delta):
        features, actions = [], []
        for i, demo in enumerate(demos):
            traj = replay_demonstration(demo, env, spec, delta, index=i)
            features += [tr.features for tr in traj.transitions]
            actions += [tr.action for tr in traj.transitions]
        if not features:
            raise DataError('no demonstration transitions to learn from')
        self.features = torch.stack(features).to(DTYPE)
        self.actions = torch.tensor(actions, dtype=torch.long)
        logging.info(f'Creating dataset with {len(demos)} demonstrations, {len(self)} transitions')

    def __len__(self):
        return self.actions.shape[0]

    def __getitem__(self, i):
        return {'features': self.features[i], 'action': self.actions[i]}
