import torch

from policy.categorical import DTYPE, backward_logits, forward_logits


def NLL_loss(features, actions, params):
    """Mean negative log-likelihood of the demonstrated actions and its descent gradient"""
    features = torch.as_tensor(features, dtype=DTYPE)
    actions = torch.as_tensor(actions, dtype=torch.long)
    n = actions.shape[0]
    log_p = torch.log_softmax(forward_logits(features, params), dim=1)
    rows = torch.arange(n)
    loss = -log_p[rows, actions].mean()
    dlogits = torch.exp(log_p)
    dlogits[rows, actions] -= 1.0
    return float(loss), backward_logits(features, dlogits / n, params)


@torch.no_grad()
def NLL_value(features, actions, params):
    features = torch.as_tensor(features, dtype=DTYPE)
    actions = torch.as_tensor(actions, dtype=torch.long)
    log_p = torch.log_softmax(forward_logits(features, params), dim=1)
    return float(-log_p[torch.arange(actions.shape[0]), actions].mean())
