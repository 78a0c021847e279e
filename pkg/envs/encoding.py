""" Observation tokens, online similarity pruning and the sparse multi-turn state """
import math
from dataclasses import dataclass

import torch

from utils.errors import DomainError
from .gridnav import N_ACTIONS, N_FIXED_CLASSES

DTYPE = torch.float64


@dataclass(frozen=True)
class EncodingSpec:
    view_size: int = 5
    n_object_classes: int = 1
    pos_code_freqs: int = 16
    pos_code_period: int = 32
    t_max: int = 200

    @classmethod
    def from_config(cls, config):
        return cls(view_size=config.view_size, n_object_classes=config.n_object_classes,
                   pos_code_freqs=config.pos_code_freqs, pos_code_period=config.pos_code_period,
                   t_max=config.t_max)

    @property
    def n_tokens(self):
        return self.view_size ** 2

    @property
    def n_classes(self):
        return N_FIXED_CLASSES + self.n_object_classes

    @property
    def token_dim(self):
        return self.n_classes * self.n_tokens + 4 * self.pos_code_freqs

    @property
    def feature_dim(self):
        return 2 * self.token_dim + N_ACTIONS + self.n_object_classes + 1


@dataclass(frozen=True, eq=False)
class TokenSet:
    tokens: torch.Tensor
    classes: tuple

    def __len__(self):
        return self.tokens.shape[0]


@dataclass(frozen=True, eq=False)
class HistoryCache:
    keys: torch.Tensor
    action_embeddings: tuple
    step_count: int

    @classmethod
    def empty(cls, dim):
        return cls(torch.zeros((0, dim), dtype=DTYPE), (), 0)

    @property
    def prev_action(self):
        return self.action_embeddings[-1] if self.action_embeddings else None


@dataclass(frozen=True, eq=False)
class PruneResult:
    mask: torch.Tensor
    retained: TokenSet
    kept_count: int


def position_code(offsets, spec):
    """Sinusoidal code of (row, col) offsets; distinct cells are close to orthogonal"""
    offsets = torch.as_tensor(offsets, dtype=DTYPE).reshape(-1, 2)
    m = torch.arange(1, spec.pos_code_freqs + 1, dtype=DTYPE)
    omega = 2 * math.pi * m / spec.pos_code_period
    parts = []
    for axis in (0, 1):
        angle = offsets[:, axis:axis + 1] * omega
        parts += [torch.cos(angle), torch.sin(angle)]
    return torch.cat(parts, dim=1) / math.sqrt(2 * spec.pos_code_freqs)


def encode_observation(raw, spec):
    """One unit-norm token per window cell: class x window-slot one-hot and the cell's position code"""
    classes = torch.as_tensor(raw.classes, dtype=torch.long).reshape(-1)
    m = classes.shape[0]
    if m != spec.n_tokens:
        raise DomainError(f'expected a {spec.view_size}x{spec.view_size} view, got {m} cells')
    slot = torch.zeros((m, spec.n_classes * m), dtype=DTYPE)
    slot[torch.arange(m), classes * m + torch.arange(m)] = 1.0
    tokens = torch.cat([slot, position_code(raw.offsets, spec)], dim=1) / math.sqrt(2.0)
    return TokenSet(tokens, tuple(classes.tolist()))


def prune_tokens(tokens, cache, delta):
    x = tokens.tokens
    if cache.keys.shape[0] == 0:
        mask = torch.ones(x.shape[0], dtype=torch.bool)
    else:
        if cache.keys.shape[1] != x.shape[1]:
            raise DomainError(f'token dim {x.shape[1]} does not match cache key dim {cache.keys.shape[1]}')
        max_sim = (x @ cache.keys.T).max(dim=1).values
        mask = max_sim < delta
    keep = mask.nonzero().flatten().tolist()
    retained = TokenSet(x[mask], tuple(tokens.classes[i] for i in keep))
    return PruneResult(mask, retained, len(keep))


def update_state(cache, result, prev_action):
    keys = torch.cat([cache.keys, result.retained.tokens], dim=0)
    return HistoryCache(keys, cache.action_embeddings + (int(prev_action),), cache.step_count + 1)


def _mean_or_zero(x, dim):
    return x.mean(dim=0) if x.shape[0] else torch.zeros(dim, dtype=DTYPE)


def summarize(cache, current, instruction, spec):
    """Fixed-size policy input: pooled current tokens, pooled history, previous action, goal class, step"""
    d = spec.token_dim
    prev = torch.zeros(N_ACTIONS, dtype=DTYPE)
    if cache.prev_action is not None:
        prev[cache.prev_action] = 1.0
    goal = torch.zeros(spec.n_object_classes, dtype=DTYPE)
    goal[instruction] = 1.0
    step = torch.tensor([cache.step_count / spec.t_max], dtype=DTYPE)
    return torch.cat([_mean_or_zero(current.retained.tokens, d), _mean_or_zero(cache.keys, d), prev, goal, step])
