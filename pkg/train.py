import logging
import math
import os

import numpy as np
import torch
import torch.optim.lr_scheduler as lr_scheduler
from torch import optim
from torch.utils.data import DataLoader, random_split
from torch.utils.tensorboard import SummaryWriter
from tqdm import tqdm

from envs.encoding import EncodingSpec
from envs.gridnav import N_ACTIONS
from envs.layouts import generate_bucketed_layouts, generate_layouts, layout_hash, load_layout_dir
from loss.advantage import RolloutBuffer, advantages
from loss.hapoLoss import GroupBatch, hapo_objective, objective_value
from loss.nllLoss import NLL_loss, NLL_value
from policy.categorical import PolicyParams, ReferencePolicy, finite_difference_gradient, relative_error
from policy.init_weights import init_weights
from utils.dataset import DemoDataset, curate_demonstrations, generate_demonstrations
from utils.errors import TrainingError, UsageError
from utils.eval import evaluate
from utils.rollout import Orchestrator, WorkerPool, retain
from utils.records import write_records

CHECKPOINT_VERSION = 1
GRADCHECK_COORDS = 8
GRADCHECK_TOL = 1e-4


def save_checkpoint(params, optimizer, f):
    checkpoint = {
        'format_version': CHECKPOINT_VERSION,
        'n_features': params.n_features,
        'n_actions': N_ACTIONS,
        'hidden_width': params.hidden_width,
        'weights': params.weights,
        'hidden': params.hidden,
        'optimizer': None if optimizer is None else optimizer.state_dict(),
    }
    torch.save(checkpoint, f)


def load_checkpoint(f):
    """Returns (PolicyParams, optimizer state dict or None)"""
    checkpoint = torch.load(f, weights_only=False)
    if checkpoint.get('format_version') != CHECKPOINT_VERSION:
        raise UsageError(f'unsupported checkpoint format {checkpoint.get("format_version")!r} in {f}')
    params = PolicyParams(checkpoint['weights'], checkpoint['hidden'])
    if params.n_features != checkpoint['n_features'] or params.weights.shape[1] != checkpoint['n_actions']:
        raise UsageError(f'checkpoint {f} shapes do not match its header')
    return params, checkpoint['optimizer']


def _assign_grads(params, grad):
    for t, g in zip(params.tensors(), grad.tensors()):
        t.grad = g.clone()


def il_warmup(demos, params, config, env, writer=None):
    """
    Minimises the mean NLL of teacher-forced demonstration actions. Returns the trained params
    and the loss curve {'train': [initial, epoch 1, ...], 'val': [...]}, both over full splits.
    """
    params = params.clone()
    spec = EncodingSpec.from_config(config)
    dataset = DemoDataset(demos, env, spec, config.prune_delta)
    n_val = int(len(dataset) * config.il_val_percent / 100)
    n_train = len(dataset) - n_val
    g = torch.Generator().manual_seed(config.seed)
    train, val = random_split(dataset, [n_train, n_val], generator=g)
    train_loader = DataLoader(train, batch_size=config.il_batch_size, shuffle=True, generator=g)
    train_x, train_y = dataset.features[train.indices], dataset.actions[train.indices]
    val_x, val_y = dataset.features[val.indices], dataset.actions[val.indices]

    epochs = config.il_epochs
    optimizer = optim.SGD(params.tensors(), lr=config.il_lr, momentum=config.momentum)
    logging.info(f'''Starting imitation warm-up:
                     Epochs:          {epochs}
                     Batch size:      {config.il_batch_size}
                     Learning rate:   {config.il_lr}
                     Schedule:        {config.il_schedule}
                     Demonstrations:  {len(demos)}
                     Training size:   {n_train}
                     Validation size: {n_val}''')

    # cosine factor from 1 down to 0.05
    def lf(x): return (((1 + math.cos(x * math.pi / epochs)) / 2) ** 1.0) * 0.95 + 0.05
    scheduler = lr_scheduler.LambdaLR(optimizer, lr_lambda=lf if config.il_schedule == 'cosine' else lambda x: 1.0)

    curve = {'train': [NLL_value(train_x, train_y, params)], 'val': []}
    if n_val:
        curve['val'].append(NLL_value(val_x, val_y, params))
    for epoch in range(epochs):
        with tqdm(total=n_train, desc=f'IL epoch {epoch + 1}/{epochs}', unit='tr',
                  disable=not config.progress, leave=False) as pbar:
            for batch in train_loader:
                loss, grad = NLL_loss(batch['features'], batch['action'], params)
                if not math.isfinite(loss):
                    raise TrainingError(f'non-finite imitation loss at epoch {epoch + 1}')
                optimizer.zero_grad()
                _assign_grads(params, grad)
                optimizer.step()
                pbar.set_postfix(**{'loss(batch)': loss})
                pbar.update(batch['action'].shape[0])
        scheduler.step()
        curve['train'].append(NLL_value(train_x, train_y, params))
        if n_val:
            curve['val'].append(NLL_value(val_x, val_y, params))
        if writer is not None:
            writer.add_scalar('IL/nll', curve['train'][-1], epoch + 1)
            if n_val:
                writer.add_scalar('IL/val_nll', curve['val'][-1], epoch + 1)
    logging.info(f'Imitation NLL {curve["train"][0]:.4f} -> {curve["train"][-1]:.4f}')
    return params, curve


def _gradcheck(batch, params, ref, grad, config):
    kwargs = dict(eps_low=config.eps_low, eps_high=config.eps_high, kl_coeff=config.kl_coeff,
                  dual_clip=config.dual_clip, clipcov=config.clipcov)
    coords = np.random.default_rng(config.seed).choice(params.flat().numel(),
                                                       size=min(GRADCHECK_COORDS, params.flat().numel()),
                                                       replace=False).tolist()
    numeric = finite_difference_gradient(lambda p: objective_value(batch, p, ref.params, **kwargs), params,
                                         coords=coords)
    analytic = grad.flat()
    err = relative_error(analytic[coords], numeric[coords])
    if err > GRADCHECK_TOL:
        raise TrainingError(f'analytic gradient disagrees with finite differences (rel. error {err:.2e})')


def hapo_update(group, params, ref, adv, config, optimizer=None):
    """
    Gradient ascent on the clipped objective over the fresh group. With an optimizer the bound
    params are updated in place; without one a copy is updated with plain SGD.
    Returns (params, UpdateStats of the first epoch).
    """
    if optimizer is None:
        params = params.clone()
        optimizer = optim.SGD(params.tensors(), lr=config.lr, momentum=config.momentum, maximize=True)
    batch = GroupBatch.from_group(group, adv)
    first = None
    for epoch in range(config.ppo_epochs):
        result = hapo_objective(batch, params, ref.params, eps_low=config.eps_low, eps_high=config.eps_high,
                                kl_coeff=config.kl_coeff, dual_clip=config.dual_clip, clipcov=config.clipcov)
        if epoch == 0:
            first = result.stats
            if config.debug_gradcheck:
                _gradcheck(batch, params, ref, result.grad, config)
        optimizer.zero_grad()
        _assign_grads(params, result.grad)
        optimizer.step()
        if not params.is_finite():
            raise TrainingError('non-finite parameters after update')
    return params, first


def training_layouts(config):
    train = generate_layouts(config.train_layouts, config.seed, tuple(config.layout_size), config.layout_density,
                             config.n_object_classes)
    return train, {layout_hash(layout) for layout in train}


def build_layouts(config):
    """
    Training layouts and a held-out set disjoint from them by occupancy hash. With eval_per_bucket
    set, the held-out set is balanced over the evaluation buckets, eval_layouts split evenly
    between them and never fewer than eval_per_bucket each.
    """
    train, train_hashes = training_layouts(config)
    size_range = tuple(config.eval_layout_size)
    if config.eval_layout_dir:
        held_out = load_layout_dir(config.eval_layout_dir)
    elif config.eval_per_bucket > 0:
        buckets = config.report_buckets
        per_bucket = max(config.eval_per_bucket, math.ceil(config.eval_layouts / len(buckets)))
        held_out = generate_bucketed_layouts(per_bucket, buckets, config.seed + 7919, size_range,
                                             config.layout_density, config.n_object_classes,
                                             exclude_hashes=train_hashes)
    else:
        held_out = generate_layouts(config.eval_layouts, config.seed + 7919, size_range, config.layout_density,
                                    config.n_object_classes, exclude_hashes=train_hashes)
    return train, held_out, train_hashes


def _timeline_record(iteration, phase, report=None, stats=None, **extra):
    rec = {'iteration': iteration, 'phase': phase,
           'SR': None if report is None else report.overall['SR'],
           'SPL': None if report is None else report.overall['SPL'],
           'surrogate': None if stats is None else stats.surrogate_loss,
           'KL': None if stats is None else stats.kl,
           'clip_fraction': None if stats is None else stats.clip_fraction}
    if stats is not None:
        rec.update(masked_fraction=stats.masked_fraction, kl_penalty=stats.kl_penalty,
                   total_loss=stats.total_loss, grad_norm=stats.grad_norm)
    rec.update(extra)
    return rec


def training_loop(env_factory, config, params=None):
    """Imitation warm-up, frozen reference, then collect / estimate / update iterations"""
    spec = EncodingSpec.from_config(config)
    writer = SummaryWriter(log_dir=config.tensorboard_dir) if config.tensorboard_dir else None
    if config.checkpoint_dir:
        os.makedirs(config.checkpoint_dir, exist_ok=True)
    train_layouts, held_out, train_hashes = build_layouts(config)

    def held_out_report():
        report, _ = evaluate(params, held_out, config.report_buckets, config, exclude_hashes=train_hashes)
        return report

    logging.info(f'''Starting training:
                     Seed:            {config.seed}
                     Kernel:          {config.kernel.name}
                     Reward mode:     {config.reward_mode}
                     Group size:      {config.group_size}
                     Retention:       {config.retention}
                     RL iterations:   {config.rl_iterations}
                     Learning rate:   {config.lr}
                     Clip ratios:     {config.eps_low} / {config.eps_high}
                     KL coefficient:  {config.kl_coeff}
                     Workers:         {config.worker_count}
                     Layouts:         {len(train_layouts)} train / {len(held_out)} held-out''')

    if params is None:
        params = init_weights(spec.feature_dim, config.hidden_width, config.init_type, config.seed)
    il_extra = {}
    if config.il_epochs > 0 and config.il_demos > 0:
        pool_layouts = [train_layouts[i % len(train_layouts)] for i in range(config.demo_pool)]
        pool = generate_demonstrations(env_factory(), pool_layouts, config.seed, config.scan_turn_prob)
        demos, _ = curate_demonstrations(pool, config.il_strategy, config.il_demos, config.buckets,
                                         np.random.default_rng(config.seed))
        params, curve = il_warmup(demos, params, config, env_factory(), writer)
        il_extra = {'nll': curve['train'][-1]}

    report = held_out_report()
    timeline = [_timeline_record(0, 'il', report, **il_extra)]
    logging.info(f'Warm-up held-out SR {report.overall["SR"]:.1f} SPL {report.overall["SPL"]:.1f}')
    if writer is not None:
        writer.add_scalar('Eval/SR', report.overall['SR'], 0)
        writer.add_scalar('Eval/SPL', report.overall['SPL'], 0)

    ref = ReferencePolicy(params)
    orchestrator = Orchestrator(env_factory, spec, config.prune_delta, WorkerPool(config.worker_count),
                                base_seed=config.seed, spill_dir=config.spill_dir, progress=config.progress)
    buffer = RolloutBuffer((), config.retention, config.group_size)
    optimizer = optim.SGD(params.tensors(), lr=config.lr, momentum=config.momentum, maximize=True)
    if config.checkpoint_dir:
        save_checkpoint(params, optimizer, os.path.join(config.checkpoint_dir, 'iter0.pt'))
        logging.info('Checkpoint 0 saved !')

    def sampler(index, seed):
        return train_layouts[seed % len(train_layouts)]

    iteration = 0
    try:
        for iteration in tqdm(range(1, config.rl_iterations + 1), desc='RL', unit='it', disable=not config.progress):
            fresh = orchestrator.collect(config.group_size, params, sampler, policy_version=iteration - 1)
            buffer = retain(buffer, fresh)
            adv = advantages(fresh, config.gamma, config.kernel, config.normalize_advantage, buffer=buffer,
                             allow_singleton=config.allow_singleton_baseline)
            if config.spill_dir:
                write_records(adv.to_records(), os.path.join(config.spill_dir, f'advantages_v{iteration - 1}.jsonl'))
            params, stats = hapo_update(fresh, params, ref, adv, config, optimizer)
            if not ref.verify():
                raise TrainingError('reference policy changed during the RL phase')

            train_sr = 100.0 * sum(t.episode_result.success for t in fresh) / len(fresh)
            if writer is not None:
                writer.add_scalar('RL/surrogate_loss', stats.surrogate_loss, iteration)
                writer.add_scalar('RL/kl', stats.kl, iteration)
                writer.add_scalar('RL/clip_fraction', stats.clip_fraction, iteration)
            report = None
            if iteration % config.eval_every == 0 or iteration == config.rl_iterations:
                report = held_out_report()
                logging.info(f'Iteration {iteration}: held-out SR {report.overall["SR"]:.1f} '
                             f'SPL {report.overall["SPL"]:.1f}')
                if writer is not None:
                    writer.add_scalar('Eval/SR', report.overall['SR'], iteration)
                    writer.add_scalar('Eval/SPL', report.overall['SPL'], iteration)
                if config.checkpoint_dir:
                    save_checkpoint(params, optimizer, os.path.join(config.checkpoint_dir, f'iter{iteration}.pt'))
                    logging.info(f'Checkpoint {iteration} saved !')
            timeline.append(_timeline_record(iteration, 'rl', report, stats, train_SR=train_sr))
    except KeyboardInterrupt:
        if config.checkpoint_dir:
            save_checkpoint(params, optimizer, os.path.join(config.checkpoint_dir, 'INTERRUPTED.pt'))
            logging.info(f'Saved interrupt at iteration {iteration}')
        raise
    finally:
        if writer is not None:
            writer.close()
    return timeline, params
