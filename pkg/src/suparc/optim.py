"""AdamW with decoupled weight decay, and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


def global_grad_norm(params) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    params = list(params)
    norm = global_grad_norm(params)
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params:
            p.grad *= factor
    return norm


@dataclass
class OptimizerState:
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamW:
    """Adam moments plus decay ``p -= lr * weight_decay * p`` applied outside them."""

    def __init__(self, named_params, lr: float = 1e-4, weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params: dict[str, Tensor] = dict(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = OptimizerState(beta1=betas[0], beta2=betas[1], eps=eps)
        for name, p in self.params.items():
            self.state.exp_avg[name] = np.zeros_like(p.values)
            self.state.exp_avg_sq[name] = np.zeros_like(p.values)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        st = self.state
        st.step += 1
        bias1 = 1.0 - st.beta1 ** st.step
        bias2 = 1.0 - st.beta2 ** st.step
        for name, p in self.params.items():
            g = p.grad
            m = st.exp_avg[name]
            v = st.exp_avg_sq[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            if self.weight_decay:
                p.values -= self.lr * self.weight_decay * p.values
            p.values -= (self.lr / bias1) * m / (np.sqrt(v / bias2) + st.eps)
