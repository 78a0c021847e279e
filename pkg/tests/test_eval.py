import json
import math
import statistics
from collections import Counter
from pathlib import Path

import pytest

from envs.encoding import EncodingSpec
from envs.gridnav import GridNavEnv, NavAction
from envs.layouts import format_layout, generate_bucketed_layouts, generate_layouts, layout_hash, optimal_length
from loss.advantage import CONSTANT_ALL_STEPS, GAUSSIAN_TEMPORAL, KernelSpec
from main import main
from policy.init_weights import init_weights
from train import build_layouts, save_checkpoint, training_layouts, training_loop
from utils.analysis import ablation_matrix, compare_estimators, final_report, strategy_config
from utils.config import TrainerConfig, bucket_of, load_config
from utils.errors import ConfigError, UsageError
from utils.eval import bucket_name, evaluate, report_from_trajectories
from utils.records import read_records
from utils.rollout import ConstantAgent, OracleAgent, Orchestrator, WorkerPool, load_trajectories
from .conftest import synthetic_trajectory

CONFIGS = Path(__file__).resolve().parent.parent / 'configs'
CONFIG = TrainerConfig(progress=False, eval_buckets=[[0, 5], [5, 10], [10, None]])
LAYOUTS = generate_layouts(6, seed=9, size_range=(7, 9))


def test_oracle_scores_full_marks():
    report, trajs = evaluate(OracleAgent(), LAYOUTS, CONFIG.report_buckets, CONFIG)
    assert report.overall['SR'] == 100.0 and report.overall['SPL'] == 100.0
    assert report.success_spl == 100.0
    assert report.episode_count == len(LAYOUTS) == len(trajs)
    assert 0.0 < report.retention <= 1.0


def test_always_stop_never_succeeds():
    report, _ = evaluate(ConstantAgent(NavAction.STOP), LAYOUTS, CONFIG.report_buckets, CONFIG)
    assert report.overall['SR'] == 0.0 and report.overall['SPL'] == 0.0
    assert report.success_spl is None


def test_bucket_rates_recombine_to_overall():
    report, _ = evaluate(OracleAgent(), LAYOUTS, CONFIG.report_buckets, CONFIG, worker_count=3)
    n = sum(b['episodes'] for b in report.per_bucket.values())
    assert n == len(LAYOUTS)
    sr = math.fsum(b['SR'] * b['episodes'] for b in report.per_bucket.values()) / n
    assert sr == pytest.approx(report.overall['SR'])
    assert set(report.per_bucket) <= {bucket_name(b) for b in CONFIG.report_buckets}


def test_evaluation_leaves_the_policy_untouched():
    params = init_weights(EncodingSpec().feature_dim, init_type='normal', seed=1)
    before = params.checksum()
    report, trajs = evaluate(params, LAYOUTS[:2], CONFIG.report_buckets, CONFIG)
    assert params.checksum() == before
    assert all(t.policy_version == 0 for t in trajs)


def test_training_layout_in_held_out_set():
    with pytest.raises(ConfigError):
        evaluate(OracleAgent(), LAYOUTS, CONFIG.report_buckets, CONFIG, exclude_hashes={layout_hash(LAYOUTS[3])})


def test_report_needs_episodes_and_covering_buckets():
    with pytest.raises(UsageError):
        report_from_trajectories([], CONFIG.report_buckets)
    with pytest.raises(ConfigError):
        report_from_trajectories([synthetic_trajectory([1.0], 0)], ((1, 5),))


def test_compare_estimators_on_constant_returns():
    snapshot = [synthetic_trajectory([0.0, 0.0, 1.0], n) for n in range(3)]
    specs = [KernelSpec(GAUSSIAN_TEMPORAL, 30.0), KernelSpec(CONSTANT_ALL_STEPS)]
    study = compare_estimators([snapshot, snapshot], specs, 1.0)
    assert study.grand_mean == {'sigma=30': 0.0, CONSTANT_ALL_STEPS: 0.0}
    assert {r['kernel'] for r in study.records()} == {'sigma=30', CONSTANT_ALL_STEPS}


def test_strategy_configs():
    assert strategy_config(CONFIG, 'none').rl_iterations == 0
    assert strategy_config(CONFIG, 'hapo_inf').kernel_bandwidth == math.inf
    assert strategy_config(CONFIG, 'rl_sparse_constant_kernel').reward_mode == 'sparse'
    with pytest.raises(ConfigError):
        strategy_config(CONFIG, 'ppo')
    assert final_report([{'SR': 10.0}, {'SR': None}, {'SR': 20.0}, {'SR': None}]) == {'SR': 20.0}


def test_cli_reports_errors_as_json(tmp_path, capsys):
    code = main(['eval', '-m', str(tmp_path / 'missing.pt'), '-l', str(tmp_path)])
    assert code == 1
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert json.loads(line)['error'] == 'FileNotFoundError'

    (tmp_path / 'bad.yaml').write_text('config_version: 1\nlearning_rate: 0.1\n')
    assert main(['train', '-c', str(tmp_path / 'bad.yaml')]) == 1
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])['error'] == 'ConfigError'


def test_cli_estimators_over_spilled_buffers(tmp_path):
    spill = tmp_path / 'spill'
    orch = Orchestrator(lambda: GridNavEnv(t_max=40), EncodingSpec(), 0.95, WorkerPool(2), spill_dir=spill)
    orch.collect(4, OracleAgent(), lambda index, seed: LAYOUTS[index], policy_version=0)
    orch.collect(4, OracleAgent(), lambda index, seed: LAYOUTS[index], policy_version=1)
    out = tmp_path / 'est.jsonl'
    assert main(['estimators', '-b', str(spill), '-o', str(out), '--bandwidths', '30', 'inf']) == 0
    records = read_records(out)
    grand = [r for r in records if 't' not in r]
    assert {r['kernel'] for r in grand} == {'sigma=30', 'sigma=inf'}
    assert all(r['grand_mean'] >= 0 for r in grand)


def test_ablation_is_reproducible(small_config):
    config = small_config.replace(rl_iterations=1)
    first, timelines = ablation_matrix(config, ('none', 'hapo_sigma'), seeds=(0,))
    second, _ = ablation_matrix(config, ('none', 'hapo_sigma'), seeds=(0,))
    assert first == second
    assert [row['strategy'] for row in first] == ['none', 'hapo_sigma']
    assert set(timelines) == {('none', 0), ('hapo_sigma', 0)}


def test_untrained_row_is_sampled_not_argmax():
    config = CONFIG.replace(t_max=30)
    assert strategy_config(config, 'none').eval_greedy is False
    params = init_weights(EncodingSpec().feature_dim)
    _, greedy = evaluate(params, LAYOUTS, config.report_buckets, config)
    _, sampled = evaluate(params, LAYOUTS, config.report_buckets, strategy_config(config, 'none'))
    assert {tr.action for t in greedy for tr in t.transitions} == {NavAction.MOVE_FORWARD}
    assert len({tr.action for t in sampled for tr in t.transitions}) > 1


def test_default_held_out_set_fills_every_bucket():
    config = load_config(CONFIGS / 'default.yaml')
    train_layouts, held_out, train_hashes = build_layouts(config)
    counts = Counter(bucket_of(optimal_length(layout), config.report_buckets) for layout in held_out)
    assert set(counts) == set(range(len(config.report_buckets)))
    assert min(counts.values()) >= 20
    lo, hi = config.eval_layout_size
    assert all(lo <= layout.height <= hi for layout in held_out)
    assert not {layout_hash(layout) for layout in held_out} & train_hashes


def test_unfillable_held_out_bucket_is_a_config_error():
    with pytest.raises(ConfigError):
        generate_bucketed_layouts(2, ((0, 10), (60, math.inf)), seed=0, size_range=(7, 9), max_draws=200)
    buckets = ((0, 5), (5, math.inf))
    layouts = generate_bucketed_layouts(3, buckets, seed=0, size_range=(7, 9))
    assert sorted(bucket_of(optimal_length(layout), buckets) for layout in layouts) == [0, 0, 0, 1, 1, 1]


def test_cli_eval_rejects_training_layouts(tmp_path, capsys):
    (tmp_path / 'small.yaml').write_text('config_version: 1\ntrain_layouts: 4\nlayout_size: [7, 9]\nt_max: 40\n'
                                         'progress: false\n')
    config = load_config(tmp_path / 'small.yaml')
    save_checkpoint(init_weights(EncodingSpec.from_config(config).feature_dim), None, tmp_path / 'policy.pt')
    train_layouts, _ = training_layouts(config)
    (tmp_path / 'layouts').mkdir()
    (tmp_path / 'layouts' / 'a.txt').write_text(format_layout(train_layouts[2]))
    code = main(['eval', '-m', str(tmp_path / 'policy.pt'), '-l', str(tmp_path / 'layouts'),
                 '-c', str(tmp_path / 'small.yaml')])
    assert code == 1
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])['error'] == 'ConfigError'

    (tmp_path / 'layouts' / 'a.txt').write_text(format_layout(LAYOUTS[0]))
    out = tmp_path / 'report.jsonl'
    assert main(['eval', '-m', str(tmp_path / 'policy.pt'), '-l', str(tmp_path / 'layouts'),
                 '-c', str(tmp_path / 'small.yaml'), '-o', str(out)]) == 0
    assert read_records(out)


@pytest.mark.parametrize('text', [
    'config: [1, 2\n',
    '- config_version: 1\n',
    'config: 7\n',
    'config:\n  config_version: 1\nseeds: 3\n',
])
def test_cli_rejects_malformed_ablation_grids(tmp_path, capsys, text):
    (tmp_path / 'grid.yaml').write_text(text)
    assert main(['ablate', '-g', str(tmp_path / 'grid.yaml')]) == 1
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])['error'] == 'ConfigError'


@pytest.mark.slow
def test_temporal_kernel_estimates_values_better(tmp_path):
    gaps = []
    for seed in range(5):
        config = TrainerConfig(seed=seed, rl_iterations=20, progress=False, spill_dir=str(tmp_path / str(seed)))
        training_loop(lambda: GridNavEnv.from_config(config), config)
        snapshot = load_trajectories(tmp_path / str(seed) / 'trajectories_v10.jsonl')
        study = compare_estimators([snapshot], [KernelSpec(GAUSSIAN_TEMPORAL, 30.0),
                                                KernelSpec(GAUSSIAN_TEMPORAL, math.inf)], config.gamma)
        gaps.append(study.grand_mean['sigma=inf'] - study.grand_mean['sigma=30'])
    assert statistics.median(gaps) > 0


@pytest.mark.slow
def test_strategy_ordering():
    table, _ = ablation_matrix(TrainerConfig(progress=False),
                               ('rl_sparse_constant_kernel', 'il_only', 'hapo_inf', 'hapo_sigma'))
    sr = {row['strategy']: row['SR'] for row in table}
    assert sr['hapo_sigma'] >= sr['hapo_inf'] >= sr['il_only'] >= sr['rl_sparse_constant_kernel']
    assert sr['hapo_sigma'] - sr['il_only'] >= 3.0


@pytest.mark.slow
def test_frozen_uniform_policy_success_rate():
    config = strategy_config(load_config(CONFIGS / 'default.yaml', progress=False), 'none')
    _, held_out, train_hashes = build_layouts(config)
    params = init_weights(EncodingSpec.from_config(config).feature_dim)
    first, _ = evaluate(params, held_out, config.report_buckets, config, exclude_hashes=train_hashes)
    second, _ = evaluate(params, held_out, config.report_buckets, config, exclude_hashes=train_hashes)
    assert first.overall == second.overall
    assert first.episode_count == 60
    assert 0.0 <= first.overall['SR'] <= 20.0
