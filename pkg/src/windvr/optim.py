"""AdamW over name -> Tensor parameter maps (functional: returns new tensors)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Tensor


@dataclass
class AdamW:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
        """Update every parameter that has a gradient; others are returned unchanged."""
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            new = p.data * (1.0 - self.lr * self.weight_decay) - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[name] = Tensor(new, requires_grad=True, name=name)
        return out


def grads_by_name(params: dict[str, Tensor], grads: dict[Tensor, Tensor]) -> dict[str, np.ndarray]:
    return {name: grads[t].data for name, t in params.items() if t in grads}
