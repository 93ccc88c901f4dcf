"""AdamW with decoupled weight decay and a single step-decay schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params, grads, state: AdamWState, lr, weight_decay=0.0, betas=(0.9, 0.999),
                   eps=1e-8, decay_mask=None, lr_mult=None):
    """Update ``params`` (name -> ndarray, in place) from ``grads`` (name -> ndarray).

    Weight decay is decoupled: every decayed parameter is first shrunk by
    ``1 - lr * weight_decay``.  ``decay_mask`` (name -> bool) and ``lr_mult``
    (name -> float) default to decaying everything at the base rate.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        rate = lr * (lr_mult.get(name, 1.0) if lr_mult else 1.0)
        if weight_decay and (decay_mask is None or decay_mask.get(name, True)):
            p *= 1.0 - rate * weight_decay
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= rate * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def step_decay_lr(base_lr, step, total_steps, at=0.9, factor=0.1):
    """Constant rate, multiplied by ``factor`` from ``at`` of the run onwards."""
    return base_lr * (factor if total_steps and step >= at * total_steps else 1.0)
