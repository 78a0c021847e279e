import math
from dataclasses import dataclass, field

from envs.encoding import EncodingSpec
from envs.gridnav import GridNavEnv
from envs.layouts import layout_hash
from policy.categorical import PolicyParams
from .config import bucket_of
from .errors import ConfigError, UsageError
from .rollout import Orchestrator, WorkerPool


def bucket_name(bucket):
    lo, hi = bucket
    return f'[{lo:g},{hi:g})' if math.isfinite(hi) else f'[{lo:g},inf)'


@dataclass(frozen=True)
class EvalReport:
    """SR and SPL are percentages; empty buckets and classes are absent, not zero"""
    overall: dict
    per_bucket: dict
    per_class: dict = field(default_factory=dict)
    success_spl: float = None
    retention: float = None
    episode_count: int = 0

    def records(self, **extra):
        rec = {'SR': self.overall['SR'], 'SPL': self.overall['SPL'], 'success_SPL': self.success_spl,
               'retention': self.retention, 'episodes': self.episode_count,
               'per_bucket': self.per_bucket, 'per_class': {str(k): v for k, v in self.per_class.items()}}
        rec.update(extra)
        return rec


def _rates(results):
    n = len(results)
    return {'SR': 100.0 * sum(r.success for r in results) / n,
            'SPL': 100.0 * math.fsum(r.spl for r in results) / n,
            'episodes': n}


def report_from_trajectories(trajectories, buckets):
    """Report assembly from stored trajectories alone; buckets by oracle optimal length"""
    if not trajectories:
        raise UsageError('cannot report on zero episodes')
    by_bucket, by_class = {}, {}
    for traj in trajectories:
        r = traj.episode_result
        b = bucket_of(r.optimal_length, buckets)
        if b is None:
            raise ConfigError(f'optimal length {r.optimal_length} falls in no evaluation bucket')
        by_bucket.setdefault(b, []).append(r)
        by_class.setdefault(traj.goal_class, []).append(r)
    results = [traj.episode_result for traj in trajectories]
    successes = [r for r in results if r.success]
    total = sum(traj.total_tokens for traj in trajectories)
    return EvalReport(
        overall=_rates(results),
        per_bucket={bucket_name(buckets[b]): _rates(rs) for b, rs in sorted(by_bucket.items())},
        per_class={k: _rates(rs) for k, rs in sorted(by_class.items())},
        success_spl=100.0 * math.fsum(r.spl for r in successes) / len(successes) if successes else None,
        retention=sum(traj.kept_tokens for traj in trajectories) / total if total else None,
        episode_count=len(results),
    )


def evaluate(policy, layouts, buckets, config, exclude_hashes=(), worker_count=None):
    """
    One rollout on every held-out layout, greedy unless config.eval_greedy is off (then sampled
    with the ticket seeds). policy is PolicyParams or an agent.
    """
    if not layouts:
        raise UsageError('no evaluation layouts')
    exclude = set(exclude_hashes)
    for layout in layouts:
        if layout_hash(layout) in exclude:
            raise ConfigError(f'evaluation layout {layout_hash(layout)[:12]} also appears in the training set')
    checksum = policy.checksum() if isinstance(policy, PolicyParams) else None

    orchestrator = Orchestrator(lambda: GridNavEnv.from_config(config), EncodingSpec.from_config(config),
                                config.prune_delta, WorkerPool(worker_count or config.worker_count),
                                base_seed=config.seed)
    trajectories = orchestrator.collect(len(layouts), policy, lambda index, seed: layouts[index],
                                         greedy=config.eval_greedy)

    if checksum is not None and policy.checksum() != checksum:
        raise UsageError('evaluation modified the policy parameters')
    return report_from_trajectories(trajectories, buckets), trajectories
