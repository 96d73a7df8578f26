"""Adam with bias correction."""
from dataclasses import dataclass, field

import numpy as np

from msilax.errors import UsageError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Adam over a name -> Tensor mapping.

    ``weight_decay`` adds an L2 term to the gradient before the moment
    updates.  Gradients are cleared after every step.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def step(self):
        s = self.state
        missing = [name for name, p in self.params.items() if p.grad is None]
        if missing:
            raise UsageError(f"no gradient for parameter(s): {', '.join(missing)}")
        s.step += 1
        bc1 = 1.0 - s.beta1 ** s.step
        bc2 = 1.0 - s.beta2 ** s.step
        for name, p in self.params.items():
            dt = p.data.dtype.type
            g = p.grad
            if s.weight_decay:
                g = g + dt(s.weight_decay) * p.data
            m, v = s.m[name], s.v[name]
            m *= dt(s.beta1)
            m += dt(1.0 - s.beta1) * g
            v *= dt(s.beta2)
            v += dt(1.0 - s.beta2) * (g * g)
            m_hat = m / dt(bc1)
            v_hat = v / dt(bc2)
            p.data -= dt(s.lr) * m_hat / (np.sqrt(v_hat) + dt(s.eps))
        self.zero_grad()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
