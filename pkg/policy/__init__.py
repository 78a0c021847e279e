from .categorical import (PolicyParams, ReferencePolicy, ActionDistribution, action_distribution, sample_action,
                          log_prob_gradient, kl_divergence)
from .init_weights import init_weights
