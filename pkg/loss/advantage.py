"""
Critic-free advantage estimation.

Baselines are leave-one-out kernel regressions of discounted returns over a buffer of
complete trajectories. With the timestep as state feature the regression collapses to
per-timestep sums, so a query only needs the summed returns and trajectory counts of the
other trajectories at each timestep:

    V_t^i = sum_t' K(t, t') S_-i(t') / sum_t' K(t, t') C_-i(t')

where S_-i(t') sums G_t'^j over j != i and C_-i(t') counts the j != i that reach t'.
"""
import math
from dataclasses import dataclass, field
from typing import Optional

import torch

from utils.errors import DomainError, EstimationError

DTYPE = torch.float64

GAUSSIAN_TEMPORAL = 'gaussian_temporal'
CONSTANT_ALL_STEPS = 'constant_all_steps'
CONSTANT_FINAL_OUTCOME = 'constant_final_outcome'
KERNEL_FAMILIES = (GAUSSIAN_TEMPORAL, CONSTANT_ALL_STEPS, CONSTANT_FINAL_OUTCOME)

NORM_EPS = 1e-8


@dataclass(frozen=True, eq=False)
class Transition:
    features: Optional[torch.Tensor]
    action: int
    behavior_log_prob: float
    reward: float
    timestep: int
    kept_count: int = 0
    cell: Optional[tuple] = None
    heading: int = 0
    geodesic: int = 0


@dataclass(frozen=True, eq=False)
class Trajectory:
    transitions: tuple
    episode_result: object
    trajectory_id: int
    policy_version: int = 0
    layout_hash: str = ''
    goal_class: int = 0
    seed: int = 0
    total_tokens: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'transitions', tuple(self.transitions))
        if not self.transitions:
            raise DomainError(f'trajectory {self.trajectory_id} is empty')
        for n, tr in enumerate(self.transitions, start=1):
            if tr.timestep != n:
                raise DomainError(f'trajectory {self.trajectory_id} has timestep {tr.timestep} at position {n}')

    def __len__(self):
        return len(self.transitions)

    @property
    def rewards(self):
        return [tr.reward for tr in self.transitions]

    @property
    def kept_tokens(self):
        return sum(tr.kept_count for tr in self.transitions)


@dataclass(frozen=True)
class RolloutBuffer:
    """Most recent trajectories, oldest first; gradients use the last group_size of them"""
    trajectories: tuple = ()
    retention_capacity: int = 256
    group_size: int = 16

    def __len__(self):
        return len(self.trajectories)


@dataclass(frozen=True)
class KernelSpec:
    family: str = GAUSSIAN_TEMPORAL
    bandwidth: float = 30.0

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise DomainError(f'unknown kernel family {self.family!r}, expected one of {KERNEL_FAMILIES}')
        if self.family == GAUSSIAN_TEMPORAL and not (self.bandwidth > 0 and not math.isnan(self.bandwidth)):
            raise DomainError(f'gaussian bandwidth must be positive, got {self.bandwidth}')

    @property
    def name(self):
        if self.family == GAUSSIAN_TEMPORAL:
            return f'sigma={self.bandwidth:g}'
        return self.family


@dataclass(frozen=True, eq=False)
class AdvantageTable:
    trajectory_ids: tuple
    timesteps: tuple
    returns: torch.Tensor
    baselines: torch.Tensor
    advantages: torch.Tensor
    normalized: torch.Tensor
    spans: dict = field(default_factory=dict)

    def rows(self, trajectory_id):
        start, stop = self.spans[trajectory_id]
        return slice(start, stop)

    def to_records(self):
        return [{'trajectory_id': i, 't': t, 'G': float(g), 'V': float(v), 'A': float(a), 'A_norm': float(n)}
                for i, t, g, v, a, n in zip(self.trajectory_ids, self.timesteps, self.returns.tolist(),
                                            self.baselines.tolist(), self.advantages.tolist(),
                                            self.normalized.tolist())]


def discounted_returns(traj, gamma):
    """G_t = r_t + gamma * G_{t+1}, accepting a Trajectory or a plain reward sequence"""
    if not (0.0 < gamma <= 1.0):
        raise DomainError(f'gamma must lie in (0, 1], got {gamma}')
    rewards = traj.rewards if isinstance(traj, Trajectory) else list(traj)
    if not rewards:
        raise DomainError('cannot compute returns of an empty trajectory')
    out = [0.0] * len(rewards)
    g = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        g = rewards[t] + gamma * g if t < len(rewards) - 1 else float(rewards[t])
        out[t] = g
    return torch.tensor(out, dtype=DTYPE)


def compute_returns(trajectories, gamma):
    return {traj.trajectory_id: discounted_returns(traj, gamma) for traj in trajectories}


def kernel_weight(t, t_prime, spec):
    if spec.family != GAUSSIAN_TEMPORAL:
        return 1.0
    return math.exp(-((t - t_prime) ** 2) / (2.0 * spec.bandwidth ** 2))


def kernel_matrix(ts, ts_prime, spec):
    ts = torch.as_tensor(ts, dtype=DTYPE).reshape(-1, 1)
    ts_prime = torch.as_tensor(ts_prime, dtype=DTYPE).reshape(1, -1)
    if spec.family != GAUSSIAN_TEMPORAL:
        return torch.ones((ts.shape[0], ts_prime.shape[1]), dtype=DTYPE)
    return torch.exp(-((ts - ts_prime) ** 2) / (2.0 * spec.bandwidth ** 2))


class _BufferTables:
    """Padded per-timestep returns of a buffer, for leave-one-out queries"""

    def __init__(self, trajectories, returns):
        self.ids = torch.tensor([traj.trajectory_id for traj in trajectories], dtype=torch.long)
        self.t_max = max(len(traj) for traj in trajectories)
        self.returns = torch.zeros((len(trajectories), self.t_max), dtype=DTYPE)
        self.present = torch.zeros((len(trajectories), self.t_max), dtype=DTYPE)
        self.finals = torch.zeros(len(trajectories), dtype=DTYPE)
        for n, traj in enumerate(trajectories):
            g = returns[traj.trajectory_id]
            self.returns[n, :len(g)] = g
            self.present[n, :len(g)] = 1.0
            self.finals[n] = g[-1]

    def others(self, trajectory_id):
        return self.ids != trajectory_id


def _baseline_from_tables(tables, trajectory_id, length, spec, allow_singleton=False):
    keep = tables.others(trajectory_id)
    n_others = int(keep.sum())
    if n_others == 0:
        if allow_singleton:
            return torch.zeros(length, dtype=DTYPE)
        raise EstimationError(f'insufficient group size: no trajectory other than {trajectory_id} in the buffer')

    if spec.family == CONSTANT_FINAL_OUTCOME:
        value = tables.finals[keep].sum() / n_others
        return value.repeat(length)

    s = tables.returns[keep].sum(dim=0)
    c = tables.present[keep].sum(dim=0)
    k = kernel_matrix(torch.arange(1, length + 1), torch.arange(1, tables.t_max + 1), spec)
    num = k @ s
    den = k @ c
    if bool((den <= 0).any()):
        t = int((den <= 0).nonzero()[0]) + 1
        raise EstimationError(f'zero kernel weight for trajectory {trajectory_id} at t={t}')
    return num / den


def baseline_series(buffer, trajectory, returns, spec, allow_singleton=False):
    """V_t for every timestep of trajectory, regressed over the other trajectories of buffer"""
    trajectories = buffer.trajectories if isinstance(buffer, RolloutBuffer) else buffer
    tables = _BufferTables(trajectories, returns)
    return _baseline_from_tables(tables, trajectory.trajectory_id, len(trajectory), spec, allow_singleton)


def kernel_baseline(buffer, trajectory_id, t, returns, spec, allow_singleton=False):
    trajectories = buffer.trajectories if isinstance(buffer, RolloutBuffer) else buffer
    tables = _BufferTables(trajectories, returns)
    length = len(returns[trajectory_id])
    if not 1 <= t <= length:
        raise DomainError(f'timestep {t} outside trajectory {trajectory_id} of length {length}')
    return float(_baseline_from_tables(tables, trajectory_id, length, spec, allow_singleton)[t - 1])


def advantages(group, gamma, spec, normalize=True, buffer=None, allow_singleton=False):
    """
    Dense advantages A_t^i = G_t^i - V_t^i for every transition of the group.
    The regression runs over `buffer` (defaults to the group itself); normalisation uses the
    group's population mean and std.
    """
    group = list(group.trajectories if isinstance(group, RolloutBuffer) else group)
    regression = list(buffer.trajectories if isinstance(buffer, RolloutBuffer) else (buffer or group))
    known = {traj.trajectory_id for traj in regression}
    regression += [traj for traj in group if traj.trajectory_id not in known]

    returns = compute_returns(regression, gamma)
    tables = _BufferTables(regression, returns)
    ids, ts, gs, vs, spans = [], [], [], [], {}
    for traj in group:
        g = returns[traj.trajectory_id]
        v = _baseline_from_tables(tables, traj.trajectory_id, len(traj), spec, allow_singleton)
        spans[traj.trajectory_id] = (len(ids), len(ids) + len(traj))
        ids += [traj.trajectory_id] * len(traj)
        ts += list(range(1, len(traj) + 1))
        gs.append(g)
        vs.append(v)

    g_all = torch.cat(gs)
    v_all = torch.cat(vs)
    a_all = g_all - v_all
    if normalize:
        norm = (a_all - a_all.mean()) / (a_all.std(unbiased=False) + NORM_EPS)
    else:
        norm = a_all.clone()
    return AdvantageTable(tuple(ids), tuple(ts), g_all, v_all, a_all, norm, spans)


def reinforcepp_reference_baseline(group):
    """Batch mean of final returns, the non-leave-one-out outcome baseline"""
    finals = [float(traj.transitions[-1].reward) for traj in group]
    return math.fsum(finals) / len(finals)


@dataclass(frozen=True)
class ValueErrorProfile:
    per_timestep: dict
    grand_mean: float


def value_estimation_error(group, spec, gamma):
    """Mean |G_t - V_t| per timestep over the trajectories reaching t, and over all transitions"""
    table = advantages(group, gamma, spec, normalize=False)
    errors = table.advantages.abs()
    ts = torch.tensor(table.timesteps, dtype=torch.long)
    per_timestep = {}
    for t in range(1, int(ts.max()) + 1):
        at_t = errors[ts == t]
        per_timestep[t] = float(at_t.mean())
    return ValueErrorProfile(per_timestep, float(errors.mean()))
