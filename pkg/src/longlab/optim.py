"""AdamW with decoupled weight decay, plus the linear warmup/decay schedule."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


class OptimizerState:
    """Per-parameter first/second moments and the step counter."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def hyperparams(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step": self.step,
        }


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float | None = None) -> None:
    """One AdamW update in place. Decay is decoupled: p -= lr * wd * p."""
    if lr is None:
        lr = state.lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name} shape {p.data.shape}")
        m = self_m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = self_m / bc1
        vhat = v / bc2
        p.data -= lr * (mhat / (np.sqrt(vhat) + state.eps))
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to base_lr, then linear decay to 0 at total_steps."""
    if total_steps <= 0:
        return base_lr
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    frac = (total_steps - step) / (total_steps - warmup_steps)
    return base_lr * max(0.0, min(1.0, frac))
