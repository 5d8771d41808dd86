import math

import numpy as np


class SGD:
    """SGD with momentum and plain L2 weight decay.

    Parameters whose ``grad`` is ``None`` were not on the sampled path and are
    skipped entirely, momentum included, so an unsampled candidate block never
    moves.
    """

    def __init__(self, params, lr=0.01, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {}

    def step(self):
        lr, mom, wd = self.lr, self.momentum, self.weight_decay
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if wd:
                g = g + wd * p.data
            v = self._velocity.get(id(p))
            if v is None:
                v = np.array(g, dtype=p.dtype)
            else:
                v *= mom
                v += g
            self._velocity[id(p)] = v
            p.data = p.data - np.asarray(lr, p.dtype) * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def cosine_lr(step, total, base_lr, warmup_frac=0.05):
    """Linear warmup over the first ``warmup_frac`` of steps, then cosine decay to 0."""
    warm = max(1, int(round(total * warmup_frac)))
    if step < warm:
        return base_lr * (step + 1) / warm
    t = (step - warm) / max(1, total - warm)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(1.0, t)))
