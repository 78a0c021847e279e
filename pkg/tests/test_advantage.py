import math

import numpy as np
import pytest
import torch

from loss.advantage import (CONSTANT_ALL_STEPS, CONSTANT_FINAL_OUTCOME, GAUSSIAN_TEMPORAL, KernelSpec,
                            RolloutBuffer, advantages, baseline_series, compute_returns, discounted_returns,
                            kernel_baseline, kernel_matrix, kernel_weight, reinforcepp_reference_baseline,
                            value_estimation_error)
from utils.errors import DomainError, EstimationError
from .conftest import random_buffer, synthetic_trajectory

FAMILIES = [KernelSpec(GAUSSIAN_TEMPORAL, 3.0), KernelSpec(GAUSSIAN_TEMPORAL, math.inf),
            KernelSpec(CONSTANT_ALL_STEPS), KernelSpec(CONSTANT_FINAL_OUTCOME)]


def forward_returns(rewards, gamma):
    """Forward-summed discounted returns, independent of the backward recursion"""
    n = len(rewards)
    return [math.fsum(gamma ** (k - t) * rewards[k] for k in range(t, n)) for t in range(n)]


def brute_force_baseline(buffer, i, t, gamma, spec):
    """Double loop over every other trajectory and timestep"""
    returns = {traj.trajectory_id: forward_returns(traj.rewards, gamma) for traj in buffer}
    target = buffer[i].trajectory_id
    if spec.family == CONSTANT_FINAL_OUTCOME:
        finals = [returns[traj.trajectory_id][-1] for traj in buffer if traj.trajectory_id != target]
        return math.fsum(finals) / len(finals)
    num, den = [], []
    for traj in buffer:
        if traj.trajectory_id == target:
            continue
        for tp, g in enumerate(returns[traj.trajectory_id], start=1):
            w = kernel_weight(t, tp, spec)
            num.append(w * g)
            den.append(w)
    return math.fsum(num) / math.fsum(den)


def test_kernel_weight_values_and_symmetry():
    spec = KernelSpec(GAUSSIAN_TEMPORAL, 30.0)
    assert kernel_weight(1, 31, spec) == pytest.approx(0.60653, abs=1e-5)
    assert kernel_weight(7, 7, spec) == 1.0
    assert kernel_weight(1, 31, KernelSpec(GAUSSIAN_TEMPORAL, math.inf)) == 1.0
    rng = np.random.default_rng(4)
    for t, tp in rng.integers(1, 200, size=(200, 2)):
        w = kernel_weight(int(t), int(tp), spec)
        assert w == kernel_weight(int(tp), int(t), spec)
        assert 0.0 < w <= 1.0
    matrix = kernel_matrix(range(1, 40), range(1, 40), spec)
    assert torch.equal(matrix, matrix.T)


def test_discounted_returns_examples():
    assert discounted_returns([1.0, 1.0, 1.0], 0.5).tolist() == [1.75, 1.5, 1.0]
    assert discounted_returns([2.0], 0.95).tolist() == [2.0]
    with pytest.raises(DomainError):
        discounted_returns([1.0], 0.0)
    with pytest.raises(DomainError):
        discounted_returns([1.0], 1.5)


def test_return_recursion_on_random_episodes():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        rewards = rng.normal(size=int(rng.integers(1, 60))).tolist()
        gamma = float(rng.uniform(0.5, 1.0))
        g = discounted_returns(rewards, gamma).tolist()
        for t in range(len(rewards) - 1):
            assert g[t] == rewards[t] + gamma * g[t + 1]
        assert g[-1] == rewards[-1]
        assert np.allclose(g, forward_returns(rewards, gamma), rtol=0, atol=1e-12)


@pytest.mark.parametrize('spec', FAMILIES, ids=lambda s: s.name)
def test_baseline_matches_brute_force(spec):
    rng = np.random.default_rng(1)
    for _ in range(200 // len(FAMILIES)):
        buffer = random_buffer(rng)
        gamma = float(rng.uniform(0.8, 1.0))
        table = advantages(buffer, gamma, spec, normalize=False)
        for i, traj in enumerate(buffer):
            v = table.baselines[table.rows(traj.trajectory_id)].tolist()
            for t in range(1, len(traj) + 1):
                assert v[t - 1] == pytest.approx(brute_force_baseline(buffer, i, t, gamma, spec), rel=0, abs=1e-12)


def test_kernel_baseline_single_query():
    rng = np.random.default_rng(2)
    buffer = random_buffer(rng, min_b=3)
    returns = compute_returns(buffer, 0.95)
    spec = KernelSpec(GAUSSIAN_TEMPORAL, 5.0)
    expected = brute_force_baseline(buffer, 1, 1, 0.95, spec)
    assert kernel_baseline(buffer, buffer[1].trajectory_id, 1, returns, spec) == pytest.approx(expected, abs=1e-12)


def test_reinforcepp_reduction_identity():
    rng = np.random.default_rng(3)
    spec = KernelSpec(CONSTANT_FINAL_OUTCOME)
    for _ in range(100):
        buffer = random_buffer(rng)
        b = len(buffer)
        batch_mean = reinforcepp_reference_baseline(buffer)
        table = advantages(buffer, 0.95, spec, normalize=False)
        for traj in buffer:
            v_loo = float(table.baselines[table.rows(traj.trajectory_id)][0])
            g_final = traj.rewards[-1]
            assert batch_mean == pytest.approx(((b - 1) * v_loo + g_final) / b, rel=0, abs=1e-12)


def test_large_bandwidth_limit():
    rng = np.random.default_rng(4)
    for _ in range(50):
        buffer = random_buffer(rng)
        wide = advantages(buffer, 0.95, KernelSpec(GAUSSIAN_TEMPORAL, 1e6 * 50), normalize=False)
        flat = advantages(buffer, 0.95, KernelSpec(CONSTANT_ALL_STEPS), normalize=False)
        assert torch.allclose(wide.baselines, flat.baselines, rtol=0, atol=1e-9)


@pytest.mark.parametrize('spec', FAMILIES, ids=lambda s: s.name)
def test_leave_one_out_independence(spec):
    rng = np.random.default_rng(5)
    for _ in range(20):
        buffer = random_buffer(rng, min_b=3)
        i = int(rng.integers(len(buffer)))
        noisy = list(buffer)
        noisy[i] = synthetic_trajectory(np.asarray(buffer[i].rewards) + rng.normal(size=len(buffer[i])),
                                        buffer[i].trajectory_id)
        a = advantages(buffer, 0.95, spec, normalize=False)
        b = advantages(noisy, 0.95, spec, normalize=False)
        rows = a.rows(buffer[i].trajectory_id)
        assert torch.allclose(a.baselines[rows], b.baselines[rows], rtol=0, atol=1e-12)


def test_examples_by_hand():
    # two trajectories of returns [1, 1] and [3, 3] with gamma 1: each baseline is the other's return
    buffer = [synthetic_trajectory([0.0, 1.0], 0), synthetic_trajectory([0.0, 3.0], 1)]
    table = advantages(buffer, 1.0, KernelSpec(CONSTANT_ALL_STEPS), normalize=False)
    assert table.baselines.tolist() == [3.0, 3.0, 1.0, 1.0]
    assert table.advantages.tolist() == [-2.0, -2.0, 2.0, 2.0]


def test_singleton_group():
    buffer = [synthetic_trajectory([1.0, 2.0], 0)]
    with pytest.raises(EstimationError):
        advantages(buffer, 0.95, KernelSpec())
    table = advantages(buffer, 0.95, KernelSpec(), allow_singleton=True)
    assert table.baselines.tolist() == [0.0, 0.0]


def test_normalization_statistics():
    rng = np.random.default_rng(6)
    table = advantages(random_buffer(rng, min_b=4), 0.95, KernelSpec())
    assert float(table.normalized.mean()) == pytest.approx(0.0, abs=1e-10)
    assert float(table.normalized.std(unbiased=False)) == pytest.approx(1.0, abs=1e-6)


def test_stale_buffer_feeds_the_baseline_only():
    rng = np.random.default_rng(7)
    stale = [synthetic_trajectory(rng.normal(size=5), 100 + n, policy_version=0) for n in range(4)]
    fresh = [synthetic_trajectory(rng.normal(size=5), n, policy_version=1) for n in range(3)]
    buffer = RolloutBuffer(tuple(stale + fresh), 256, 3)
    table = advantages(fresh, 0.95, KernelSpec(CONSTANT_ALL_STEPS), normalize=False, buffer=buffer)
    assert set(table.trajectory_ids) == {0, 1, 2}
    returns = compute_returns(stale + fresh, 0.95)
    v = baseline_series(buffer, fresh[0], returns, KernelSpec(CONSTANT_ALL_STEPS))
    assert torch.equal(table.baselines[table.rows(0)], v)


def test_value_estimation_error():
    constant = [synthetic_trajectory([0.0, 0.0, 1.0], n) for n in range(4)]
    profile = value_estimation_error(constant, KernelSpec(GAUSSIAN_TEMPORAL, 30.0), 1.0)
    assert profile.grand_mean == 0.0
    assert all(e == 0.0 for e in profile.per_timestep.values())

    rng = np.random.default_rng(8)
    profile = value_estimation_error(random_buffer(rng), KernelSpec(), 0.95)
    assert profile.grand_mean >= 0 and all(e >= 0 for e in profile.per_timestep.values())


def test_kernel_spec_validation():
    with pytest.raises(DomainError):
        KernelSpec('epanechnikov')
    with pytest.raises(DomainError):
        KernelSpec(GAUSSIAN_TEMPORAL, 0.0)


def test_advantage_records():
    table = advantages([synthetic_trajectory([1.0], 0), synthetic_trajectory([0.0, 2.0], 1)], 0.95, KernelSpec())
    records = table.to_records()
    assert [(r['trajectory_id'], r['t']) for r in records] == [(0, 1), (1, 1), (1, 2)]
    assert set(records[0]) == {'trajectory_id', 't', 'G', 'V', 'A', 'A_norm'}
