import argparse
import json
import logging
import math
import sys
from pathlib import Path

import yaml

from envs.gridnav import GridNavEnv
from envs.layouts import load_layout_dir
from loss.advantage import KernelSpec
from train import load_checkpoint, save_checkpoint, training_layouts, training_loop
from utils.analysis import STRATEGIES, ablation_matrix, compare_estimators
from utils.config import TrainerConfig, config_from_dict, load_config
from utils.errors import ConfigError, NavError
from utils.eval import evaluate
from utils.records import write_records
from utils.rollout import load_trajectories


def get_args(argv=None):
    parser = argparse.ArgumentParser(description='Critic-free multi-turn RL on grid object navigation',
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='IL warm-up then RL; emits the metrics timeline',
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument('-c', '--config', dest='config', type=str, required=True, help='Experiment YAML')
    p.add_argument('-s', '--seed', dest='seed', type=int, default=None, help='Override the config seed')
    p.add_argument('-f', '--save', dest='save', type=str, default=None, help='Write the final policy to this .pt file')

    p = sub.add_parser('eval', help='Greedy held-out evaluation of a checkpoint',
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument('-m', '--checkpoint', dest='checkpoint', type=str, required=True, metavar='FILE')
    p.add_argument('-l', '--layouts', dest='layouts', type=str, required=True, metavar='DIR')
    p.add_argument('-c', '--config', dest='config', type=str, default=None, help='Experiment YAML for env settings')

    p = sub.add_parser('ablate', help='Strategy x seed ablation table',
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument('-g', '--grid', dest='grid', type=str, required=True,
                   help='YAML with a config mapping plus optional strategies and seeds lists')

    p = sub.add_parser('estimators', help='Value-estimation error per kernel over spilled buffers',
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument('-b', '--buffers', dest='buffers', type=str, required=True, metavar='DIR',
                   help='Directory of trajectory spill files, one buffer snapshot each')
    p.add_argument('--gamma', dest='gamma', type=float, default=0.95)
    p.add_argument('--bandwidths', dest='bandwidths', type=float, nargs='+', default=[30.0, math.inf],
                   help='Gaussian bandwidths to compare (inf for the uniform kernel)')

    for p in sub.choices.values():
        p.add_argument('-o', '--out', dest='out', type=str, default=None, help='Output file (stdout when unset)')
    return parser.parse_args(argv)


def run_train(args):
    config = load_config(args.config, seed=args.seed)
    timeline, params = training_loop(lambda: GridNavEnv.from_config(config), config)
    if args.save:
        save_checkpoint(params, None, args.save)
        logging.info(f'Policy saved to {args.save}')
    return timeline


def run_eval(args):
    config = load_config(args.config) if args.config else TrainerConfig()
    params, _ = load_checkpoint(args.checkpoint)
    layouts = load_layout_dir(args.layouts)
    _, train_hashes = training_layouts(config)
    report, _ = evaluate(params, layouts, config.report_buckets, config, exclude_hashes=train_hashes)
    return [report.records(checkpoint=args.checkpoint)]


def load_grid(path):
    try:
        with open(path, 'r') as file:
            grid = yaml.safe_load(file) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f'cannot read ablation grid {path}: {e}') from e
    if not isinstance(grid, dict):
        raise ConfigError(f'ablation grid {path} is not a mapping')
    unknown = sorted(set(grid) - {'config', 'strategies', 'seeds'})
    if unknown:
        raise ConfigError(f'unknown grid keys {unknown}')
    if not isinstance(grid.get('config', {}), dict):
        raise ConfigError(f'config in ablation grid {path} is not a mapping')
    for key in ('strategies', 'seeds'):
        if not isinstance(grid.get(key, []), list):
            raise ConfigError(f'{key} in ablation grid {path} must be a list')
    return grid


def run_ablate(args):
    grid = load_grid(args.grid)
    config = config_from_dict(grid.get('config'))
    table, timelines = ablation_matrix(config, tuple(grid.get('strategies', STRATEGIES)),
                                       tuple(grid.get('seeds', (0, 1, 2, 3, 4))))
    records = [dict(row, kind='table') for row in table]
    for (strategy, seed), timeline in timelines.items():
        records += [dict(rec, kind='timeline', strategy=strategy, seed=seed) for rec in timeline]
    return records


def run_estimators(args):
    files = sorted(Path(args.buffers).glob('trajectories_*.jsonl'))
    if not files:
        raise ConfigError(f'no buffer snapshots (trajectories_*.jsonl) in {args.buffers}')
    snapshots = [load_trajectories(f) for f in files]
    specs = [KernelSpec('gaussian_temporal', b) for b in args.bandwidths]
    return compare_estimators(snapshots, specs, args.gamma).records()


COMMANDS = {'train': run_train, 'eval': run_eval, 'ablate': run_ablate, 'estimators': run_estimators}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format='%(levelname)s: %(message)s')
    args = get_args(argv)
    try:
        records = COMMANDS[args.command](args)
        write_records(records, args.out)
    except KeyboardInterrupt:
        logging.info("Interrupted")
        return 130
    except (NavError, OSError) as e:
        print(json.dumps({'error': type(e).__name__, 'message': str(e)}, sort_keys=True))
        logging.error(str(e))
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
