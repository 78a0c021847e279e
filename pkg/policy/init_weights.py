import torch
from torch.nn import init

from envs.gridnav import N_ACTIONS
from .categorical import DTYPE, PolicyParams

# Tensors are stored (in, out) while torch.nn.init takes fan_in from dim 1, hence the transpose


def weights_init_zeros(tensor, generator):
    init.zeros_(tensor)


def weights_init_normal(tensor, generator):
    init.normal_(tensor, 0.0, 0.02, generator=generator)


def weights_init_xavier(tensor, generator):
    init.xavier_normal_(tensor.T, gain=1, generator=generator)


def weights_init_kaiming(tensor, generator):
    init.kaiming_normal_(tensor.T, a=0, mode='fan_in', generator=generator)


_INITS = {
    'zeros': weights_init_zeros,
    'normal': weights_init_normal,
    'xavier': weights_init_xavier,
    'kaiming': weights_init_kaiming,
}


def init_weights(n_features, hidden_width=0, init_type='zeros', seed=0):
    """Output weights follow init_type; a hidden layer always starts xavier so tanh units differ"""
    if init_type not in _INITS:
        raise NotImplementedError('initialization method [%s] is not implemented' % init_type)
    g = torch.Generator().manual_seed(seed)
    hidden = None
    if hidden_width > 0:
        hidden = torch.empty((n_features, hidden_width), dtype=DTYPE)
        weights_init_xavier(hidden, g)
    weights = torch.empty((hidden_width or n_features, N_ACTIONS), dtype=DTYPE)
    _INITS[init_type](weights, g)
    return PolicyParams(weights, hidden)
