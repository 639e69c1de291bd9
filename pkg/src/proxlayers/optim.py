"""First-order optimizers over parameter containers.

A container is any object with ``map(fn, *others)`` that applies ``fn``
array-wise and returns a container of the same type.
"""

from dataclasses import dataclass

import numpy as np

__all__ = ["AdamState", "adam_update"]


@dataclass
class AdamState:
    m: object
    v: object
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(params.map(np.zeros_like), params.map(np.zeros_like))


def adam_update(params, grads, state, lr=1e-3, weight_decay=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam step; weight decay enters as an L2 term added to the gradient."""
    grads = grads.map(lambda g, p: g + weight_decay * p, params)
    state.t += 1
    state.m = state.m.map(lambda m, g: beta1 * m + (1 - beta1) * g, grads)
    state.v = state.v.map(lambda v, g: beta2 * v + (1 - beta2) * g * g, grads)
    c1 = 1 - beta1**state.t
    c2 = 1 - beta2**state.t
    return params.map(lambda p, m, v: p - lr * (m / c1) / (np.sqrt(v / c2) + eps), state.m, state.v)
