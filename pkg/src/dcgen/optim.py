"""AdamW with decoupled weight decay, linear warmup, and an EMA tracker.

Update order per step, with lr_eff = lr * min(1, step / warmup_steps):

    p <- p * (1 - lr_eff * wd)            decoupled decay, before the delta
    m <- b1*m + (1-b1)*g
    v <- b2*v + (1-b2)*g^2
    p <- p - lr_eff * mhat / (sqrt(vhat) + eps)

with mhat, vhat bias-corrected by the 1-based step count. Parameters absent
from the gradient map are untouched (their moments do not advance either).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor


@dataclass
class OptimizerState:
    """First/second moment buffers plus the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def tensors(self) -> dict:
        out = {}
        for k, arr in self.m.items():
            out[f"m.{k}"] = arr
        for k, arr in self.v.items():
            out[f"v.{k}"] = arr
        return out


@dataclass
class EmaState:
    """Exponential moving average shadow of a parameter set."""

    decay: float
    shadow: dict = field(default_factory=dict)


def effective_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear warmup to base_lr, constant afterwards. `step` is 1-based."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


def adamw_step(
    params: dict,
    grads: dict,
    state: OptimizerState,
    lr: float,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    warmup_steps: int = 0,
) -> OptimizerState:
    """Apply one AdamW update in place to `params` (name -> Tensor).

    Every key in `grads` must name a param; moments are created lazily with the
    parameter's shape and updates touch only the parameters that got gradients.
    """
    b1, b2 = betas
    state.step += 1
    lr_eff = effective_lr(lr, state.step, warmup_steps)
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(grads):
        if name not in params:
            raise ContractViolation(f"gradient for unknown parameter '{name}'")
        p = params[name]
        g = np.asarray(grads[name], dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise ContractViolation(
                f"gradient shape {g.shape} does not match parameter '{name}' shape {p.data.shape}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        if weight_decay:
            p.data *= np.asarray(1.0 - lr_eff * weight_decay, dtype=p.data.dtype)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= (lr_eff * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
    return state


class AdamW:
    """Stateful convenience wrapper around adamw_step for training loops."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, warmup_steps: int = 0):
        for name, p in params.items():
            if not isinstance(p, Tensor):
                raise ContractViolation(f"parameter '{name}' is not a Tensor")
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.state = OptimizerState()

    def step(self, grads: dict):
        adamw_step(self.params, grads, self.state, self.lr, self.betas, self.eps,
                   self.weight_decay, self.warmup_steps)

    @property
    def last_lr(self) -> float:
        return effective_lr(self.lr, max(self.state.step, 1), self.warmup_steps)


def ema_update(ema: EmaState, params: dict) -> EmaState:
    """shadow <- decay*shadow + (1-decay)*param; first sight copies the param."""
    d = ema.decay
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else np.asarray(p)
        if name not in ema.shadow:
            ema.shadow[name] = data.copy()
        else:
            s = ema.shadow[name]
            s *= d
            s += (1.0 - d) * data
    return ema
