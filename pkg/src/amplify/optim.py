from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state: AdamWState, lr: float, betas=(0.9, 0.999), eps=1e-8,
               weight_decay=0.01) -> list[np.ndarray]:
    """One decoupled-weight-decay Adam update; returns new parameter arrays.

    ``params`` and ``grads`` are parallel lists of arrays (``None`` grads count
    as zero). Weight decay shrinks the parameter directly and never enters the
    moment estimates.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(i)
        v = state.v.get(i)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[i], state.v[i] = m, v
        p = p * (1.0 - lr * weight_decay)
        p = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        out.append(p)
    return out


class AdamW:
    """Thin stateful wrapper over :func:`adamw_step` for a list of Parameters."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state = AdamWState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        new = adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                         lr, self.betas, self.eps, self.weight_decay)
        for p, d in zip(self.params, new):
            p.data = d
