""" Softmax categorical policy over the navigation actions, with analytic gradients """
import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from envs.gridnav import N_ACTIONS, NavAction
from utils.errors import DomainError

DTYPE = torch.float64


@dataclass(eq=False)
class PolicyParams:
    """logits = features @ weights, or tanh(features @ hidden) @ weights with a hidden layer"""
    weights: torch.Tensor
    hidden: Optional[torch.Tensor] = None

    @property
    def n_features(self):
        return self.weights.shape[0] if self.hidden is None else self.hidden.shape[0]

    @property
    def hidden_width(self):
        return 0 if self.hidden is None else self.hidden.shape[1]

    def tensors(self):
        return [self.weights] if self.hidden is None else [self.hidden, self.weights]

    def clone(self):
        return PolicyParams(self.weights.detach().clone(),
                            None if self.hidden is None else self.hidden.detach().clone())

    def flat(self):
        return torch.cat([t.reshape(-1) for t in self.tensors()])

    def with_flat(self, vector):
        out, start = [], 0
        for t in self.tensors():
            out.append(vector[start:start + t.numel()].reshape(t.shape).clone())
            start += t.numel()
        return PolicyParams(out[-1], out[0] if self.hidden is not None else None)

    def checksum(self):
        h = hashlib.sha1()
        for t in self.tensors():
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def is_finite(self):
        return all(bool(torch.isfinite(t).all()) for t in self.tensors())


class ReferencePolicy:
    """Frozen snapshot of the warm-started policy used for the KL penalty"""

    def __init__(self, params):
        self._params = params.clone()
        self.checksum = self._params.checksum()

    @property
    def params(self):
        return self._params

    def verify(self):
        return self._params.checksum() == self.checksum


@dataclass(frozen=True, eq=False)
class ActionDistribution:
    logits: torch.Tensor
    probs: torch.Tensor
    log_probs: torch.Tensor

    @classmethod
    def from_logits(cls, logits):
        log_probs = torch.log_softmax(logits, dim=-1)
        return cls(logits, torch.exp(log_probs), log_probs)

    def log_prob(self, action):
        return float(self.log_probs[int(action)])

    def greedy(self):
        # torch.argmax returns the first maximal index, so ties go to the lowest action id
        return NavAction(int(torch.argmax(self.probs)))


def _hidden_activations(features, params):
    return torch.tanh(features @ params.hidden)


@torch.no_grad()
def forward_logits(features, params):
    """Batched logits for an (N, F) feature matrix"""
    if params.hidden is None:
        return features @ params.weights
    return _hidden_activations(features, params) @ params.weights


@torch.no_grad()
def action_distribution(features, params):
    features = torch.as_tensor(features, dtype=DTYPE)
    if features.shape[-1] != params.n_features:
        raise DomainError(f'feature dim {features.shape[-1]} does not match policy input {params.n_features}')
    if not bool(torch.isfinite(features).all()):
        raise DomainError('non-finite policy features')
    return ActionDistribution.from_logits(forward_logits(features, params))


def sample_action(dist, rng):
    """Inverse-CDF draw; consumes exactly one rng.random() per call"""
    probs = dist.probs.detach().cpu().numpy()
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side='right'))
    last = int(np.flatnonzero(probs > 0)[-1])
    action = NavAction(min(idx, last))
    return action, dist.log_prob(action)


@torch.no_grad()
def backward_logits(features, dlogits, params):
    """Pull per-row logit gradients (N, |D|) back to a PolicyParams-shaped gradient"""
    features = torch.as_tensor(features, dtype=DTYPE).reshape(-1, params.n_features)
    dlogits = dlogits.reshape(-1, N_ACTIONS)
    if params.hidden is None:
        return PolicyParams(features.T @ dlogits)
    h = _hidden_activations(features, params)
    dh = (dlogits @ params.weights.T) * (1.0 - h * h)
    return PolicyParams(h.T @ dlogits, features.T @ dh)


def log_prob_gradient(features, action, params):
    dist = action_distribution(features, params)
    dlogits = -dist.probs.clone()
    dlogits[int(action)] += 1.0
    return backward_logits(features, dlogits, params)


def kl_divergence(p, q):
    """Exact KL(p || q) over the action vocabulary, natural log"""
    p_probs = p.probs.to(DTYPE)
    terms = p_probs * (p.log_probs - q.log_probs)
    return float(torch.where(p_probs > 0, terms, torch.zeros_like(terms)).sum())


@torch.no_grad()
def kl_rows(log_p, log_q):
    """Row-wise exact KL between two (N, |D|) log-probability matrices"""
    p = torch.exp(log_p)
    return torch.where(p > 0, p * (log_p - log_q), torch.zeros_like(p)).sum(dim=1)


def finite_difference_gradient(fn, params, h=1e-5, coords=None):
    """Central differences of a scalar fn(PolicyParams) over the flattened parameters"""
    start = params.flat()
    idx = range(start.numel()) if coords is None else coords
    grad = torch.zeros_like(start)
    for i in idx:
        perturb = torch.zeros_like(start)
        perturb[i] = h
        v1 = fn(params.with_flat(start - perturb))
        v2 = fn(params.with_flat(start + perturb))
        grad[i] = (v2 - v1) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    scale = max(float(analytic.abs().max()), float(numeric.abs().max()), 1e-12)
    return float((analytic - numeric).abs().max()) / scale


def entropy(dist):
    p = dist.probs
    return float(-(torch.where(p > 0, p * dist.log_probs, torch.zeros_like(p))).sum())
