"""Adam with bias correction, as a pure function over named parameters."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import GraphUsageError
from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One update over {name: Tensor} params. Returns (new_params, new_state).

    Moments are created lazily at zero, so a fresh AdamState works for step 1.
    Every parameter must have a gradient; extra gradients are ignored.
    """
    missing = [k for k in params if k not in grads]
    if missing:
        raise GraphUsageError(f"adam_step: missing gradients for {sorted(missing)}")
    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_params = {}
    new_state = AdamState(step=t)
    for key, p in params.items():
        g = grads[key].numpy()
        if g.shape != p.shape:
            raise GraphUsageError(f"adam_step: gradient shape {g.shape} != param shape {p.shape} for '{key}'")
        m = state.m.get(key)
        v = state.v.get(key)
        m = beta1 * m + (1.0 - beta1) * g if m is not None else (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * np.square(g) if v is not None else (1.0 - beta2) * np.square(g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[key] = Tensor(p.numpy() - update, requires_grad=True)
        new_state.m[key] = m
        new_state.v[key] = v
    return new_params, new_state
