""" Estimator comparison and strategy ablations """
import logging
import math
import statistics
from dataclasses import dataclass

from envs.gridnav import GridNavEnv
from loss.advantage import CONSTANT_FINAL_OUTCOME, GAUSSIAN_TEMPORAL, value_estimation_error
from train import training_loop
from .errors import ConfigError

STRATEGIES = ('none', 'il_only', 'rl_sparse_constant_kernel', 'hapo_inf', 'hapo_sigma')


@dataclass(frozen=True)
class EstimatorStudy:
    """Per kernel name: grand-mean error and a per-timestep series, averaged over snapshots"""
    grand_mean: dict
    per_timestep: dict

    def records(self):
        out = [{'kernel': name, 'grand_mean': g} for name, g in self.grand_mean.items()]
        out += [{'kernel': name, 't': t, 'error': e}
                for name, series in self.per_timestep.items() for t, e in sorted(series.items())]
        return out


def compare_estimators(snapshots, specs, gamma):
    grand, series = {}, {}
    for spec in specs:
        profiles = [value_estimation_error(snapshot, spec, gamma) for snapshot in snapshots]
        grand[spec.name] = math.fsum(p.grand_mean for p in profiles) / len(profiles)
        merged = {}
        for p in profiles:
            for t, e in p.per_timestep.items():
                merged.setdefault(t, []).append(e)
        series[spec.name] = {t: math.fsum(es) / len(es) for t, es in sorted(merged.items())}
    return EstimatorStudy(grand, series)


def strategy_config(config, strategy):
    if strategy == 'none':
        # argmax of an untrained policy is a constant action, so this row is sampled
        return config.replace(il_epochs=0, rl_iterations=0, eval_greedy=False)
    if strategy == 'il_only':
        return config.replace(rl_iterations=0)
    if strategy == 'rl_sparse_constant_kernel':
        return config.replace(reward_mode='sparse', kernel_family=CONSTANT_FINAL_OUTCOME)
    if strategy == 'hapo_inf':
        return config.replace(kernel_family=GAUSSIAN_TEMPORAL, kernel_bandwidth=math.inf)
    if strategy == 'hapo_sigma':
        return config.replace(kernel_family=GAUSSIAN_TEMPORAL)
    raise ConfigError(f'unknown strategy {strategy!r}, expected one of {STRATEGIES}')


def final_report(timeline):
    return [rec for rec in timeline if rec['SR'] is not None][-1]


def ablation_matrix(config, strategies=STRATEGIES, seeds=(0, 1, 2, 3, 4)):
    """
    Runs training_loop for every (strategy, seed) with shared seeds; returns the table of
    median SR/SPL per strategy and the per-cell timelines keyed by (strategy, seed).
    """
    table, timelines = [], {}
    for strategy in strategies:
        srs, spls = [], []
        for seed in seeds:
            cell = strategy_config(config, strategy).replace(seed=seed)
            logging.info(f'Ablation cell {strategy} seed {seed}')
            timeline, _ = training_loop(lambda: GridNavEnv.from_config(cell), cell)
            timelines[(strategy, seed)] = timeline
            last = final_report(timeline)
            srs.append(last['SR'])
            spls.append(last['SPL'])
        table.append({'strategy': strategy, 'SR': statistics.median(srs), 'SPL': statistics.median(spls),
                      'seeds': list(seeds), 'per_seed_SR': srs})
    return table, timelines
