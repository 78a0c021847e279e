"""
Clipped multi-turn policy objective with a full KL penalty to a frozen reference.

    J = sum_i sum_t w_t^i * (min(rho A, clip(rho, 1 - eps_low, 1 + eps_high) A) - beta * KL_t)

with w_t^i = 1 / (B * |tau_i|). For negative advantages the surrogate is additionally bounded
below by dual_clip * A. Gradients are taken analytically with respect to the logits and pulled
back through the policy with backward_logits.
"""
import math
from dataclasses import dataclass

import torch

from policy.categorical import DTYPE, backward_logits, forward_logits, kl_rows
from utils.errors import DomainError, TrainingError


@dataclass(frozen=True)
class ClipCovConfig:
    enabled: bool = False
    upper: float = 5.0
    lower: float = 1.0
    ratio: float = 0.0002

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise DomainError(f'clipcov ratio must lie in [0, 1], got {self.ratio}')
        if self.lower > self.upper:
            raise DomainError(f'clipcov lower bound {self.lower} exceeds upper bound {self.upper}')


@dataclass(frozen=True)
class UpdateStats:
    """surrogate_loss is the weighted surrogate objective; total_loss = -surrogate_loss + kl_penalty"""
    surrogate_loss: float
    kl: float
    kl_penalty: float
    total_loss: float
    clip_fraction: float
    masked_fraction: float
    grad_norm: float
    entropy: float = 0.0

    def as_dict(self):
        return {'surrogate': self.surrogate_loss, 'KL': self.kl, 'kl_penalty': self.kl_penalty,
                'total_loss': self.total_loss, 'clip_fraction': self.clip_fraction,
                'masked_fraction': self.masked_fraction, 'grad_norm': self.grad_norm, 'entropy': self.entropy}


@dataclass(frozen=True, eq=False)
class GroupBatch:
    """Transitions of a gradient group stacked row-wise, with their per-row weights"""
    features: torch.Tensor
    actions: torch.Tensor
    behavior_log_probs: torch.Tensor
    advantages: torch.Tensor
    weights: torch.Tensor
    trajectory_ids: tuple
    timesteps: tuple

    def __len__(self):
        return self.actions.shape[0]

    @classmethod
    def from_group(cls, group, table):
        feats, actions, blp, adv, weights, ids, ts = [], [], [], [], [], [], []
        b = len(group)
        for traj in group:
            rows = table.rows(traj.trajectory_id)
            adv.append(table.normalized[rows])
            for tr in traj.transitions:
                feats.append(tr.features)
                actions.append(int(tr.action))
                blp.append(tr.behavior_log_prob)
                weights.append(1.0 / (b * len(traj)))
                ids.append(traj.trajectory_id)
                ts.append(tr.timestep)
        return cls(torch.stack(feats).to(DTYPE), torch.tensor(actions, dtype=torch.long),
                   torch.tensor(blp, dtype=DTYPE), torch.cat(adv).to(DTYPE),
                   torch.tensor(weights, dtype=DTYPE), tuple(ids), tuple(ts))


@dataclass(frozen=True, eq=False)
class ObjectiveResult:
    objective: float
    stats: UpdateStats
    grad: object
    ratios: torch.Tensor
    surrogate_terms: torch.Tensor
    kl_terms: torch.Tensor
    mask: torch.Tensor


def clipcov_mask(log_probs, advantages, config):
    """
    Covariance proxy cov_t = (log pi_t - mean log pi) * (A_t - mean A). Among transitions whose
    cov lies in [lower, upper], the ceil(ratio * N) with largest cov are masked.
    """
    n = log_probs.shape[0]
    mask = torch.zeros(n, dtype=torch.bool)
    if not config.enabled or config.ratio <= 0.0 or n == 0:
        return mask, 0.0
    cov = (log_probs - log_probs.mean()) * (advantages - advantages.mean())
    eligible = ((cov >= config.lower) & (cov <= config.upper)).nonzero().flatten()
    n_mask = min(math.ceil(config.ratio * n), eligible.numel())
    if n_mask > 0:
        order = torch.argsort(cov[eligible], descending=True, stable=True)
        mask[eligible[order[:n_mask]]] = True
    return mask, n_mask / n


def _clip_bounds(eps_low, eps_high):
    return 1.0 - eps_low, 1.0 + eps_high


def _first_bad_row(batch, *rows):
    bad = torch.zeros(len(batch), dtype=torch.bool)
    for r in rows:
        r = r.reshape(len(batch), -1)
        bad |= ~torch.isfinite(r).all(dim=1)
    if bool(bad.any()):
        n = int(bad.nonzero()[0])
        return batch.trajectory_ids[n], batch.timesteps[n]
    return None


def _entropy_rows(log_p):
    p = torch.exp(log_p)
    return -torch.where(p > 0, p * log_p, torch.zeros_like(p)).sum(dim=1)


def hapo_objective(batch, params, ref_params, eps_low=0.2, eps_high=0.28, kl_coeff=0.001,
                   dual_clip=3.0, clipcov=ClipCovConfig()):
    """Objective value, UpdateStats and the ascent gradient (PolicyParams) for one gradient group"""
    log_p = torch.log_softmax(forward_logits(batch.features, params), dim=1)
    log_q = torch.log_softmax(forward_logits(batch.features, ref_params), dim=1)
    p = torch.exp(log_p)
    rows = torch.arange(len(batch))
    adv = batch.advantages
    w = batch.weights

    log_pa = log_p[rows, batch.actions]
    ratio = torch.exp(log_pa - batch.behavior_log_probs)
    lo, hi = _clip_bounds(eps_low, eps_high)
    surr1 = ratio * adv
    surr2 = torch.clamp(ratio, min=lo, max=hi) * adv
    surr = torch.minimum(surr1, surr2)
    clipped = surr2 < surr1
    if dual_clip and math.isfinite(eps_low):
        floor = dual_clip * adv
        dual = (adv < 0) & (floor > surr)
        surr = torch.where(dual, floor, surr)
        clipped = clipped | dual
    active = ~clipped

    kl = kl_rows(log_p, log_q)
    bad = _first_bad_row(batch, surr, kl)
    if bad is not None:
        raise TrainingError(f'non-finite objective at trajectory {bad[0]} t={bad[1]}', *bad)

    mask, masked_fraction = clipcov_mask(log_pa, adv, clipcov)

    onehot = torch.zeros_like(p)
    onehot[rows, batch.actions] = 1.0
    coeff = torch.where(active & ~mask, adv * ratio, torch.zeros_like(adv))
    d_surr = coeff.unsqueeze(1) * (onehot - p)
    d_kl = p * (log_p - log_q - kl.unsqueeze(1))
    dlogits = w.unsqueeze(1) * (d_surr - kl_coeff * d_kl)
    bad = _first_bad_row(batch, dlogits)
    if bad is not None:
        raise TrainingError(f'non-finite gradient at trajectory {bad[0]} t={bad[1]}', *bad)
    grad = backward_logits(batch.features, dlogits, params)

    surrogate = float((w * surr).sum())
    kl_mean = float((w * kl).sum())
    kl_penalty = kl_coeff * kl_mean
    grad_norm = float(torch.sqrt(sum((g * g).sum() for g in grad.tensors())))
    if not math.isfinite(grad_norm):
        raise TrainingError('non-finite gradient norm')
    stats = UpdateStats(
        surrogate_loss=surrogate,
        kl=kl_mean,
        kl_penalty=kl_penalty,
        total_loss=-surrogate + kl_penalty,
        clip_fraction=float(clipped.to(DTYPE).mean()),
        masked_fraction=masked_fraction,
        grad_norm=grad_norm,
        entropy=float(_entropy_rows(log_p).mean()),
    )
    return ObjectiveResult(surrogate - kl_penalty, stats, grad, ratio, surr, kl, mask)


def objective_value(batch, params, ref_params, **kwargs):
    """Scalar J, for finite-difference checks"""
    return hapo_objective(batch, params, ref_params, **kwargs).objective
