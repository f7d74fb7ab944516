"""Small neural-net building blocks on top of the autodiff Tensor.

Modules here are deliberately plain: each owns its parameter Tensors and
registers them into a flat name -> Tensor dict supplied by the caller, so a
model's full parameter set is a single dictionary with hierarchical dotted
names (group boundaries are name prefixes).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .rng import Rng
from . import tensor as T
from .tensor import Tensor


@dataclass
class LoraAdapter:
    """Low-rank additive update for one linear layer.

    `a` is [rank, in_dim] random-init, `b` is [out_dim, rank] zero-init, so the
    adapted layer equals the base layer until training moves `b`. The effective
    weight delta is (alpha / rank) * b @ a.
    """

    target: str
    rank: int
    alpha: float
    a: Tensor
    b: Tensor

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def xavier_uniform(rng: Rng, in_dim: int, out_dim: int) -> np.ndarray:
    limit = float(np.sqrt(6.0 / (in_dim + out_dim)))
    return rng.uniform([in_dim, out_dim], low=-limit, high=limit)


class Linear:
    """y = x @ W + b with W stored [in_dim, out_dim]; optional LoRA path."""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, init: str = "xavier", init_std: float = 0.02):
        if init == "xavier":
            w = xavier_uniform(rng, in_dim, out_dim)
        elif init == "zero":
            w = np.zeros((in_dim, out_dim), dtype=np.float32)
        elif init == "normal":
            w = rng.normal([in_dim, out_dim], std=init_std)
        else:
            raise ContractViolation(f"unknown init '{init}'")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True)
        self.lora: LoraAdapter | None = None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.add(T.matmul(x, self.weight), self.bias)
        if self.lora is not None:
            down = T.matmul(x, T.permute(self.lora.a, (1, 0)))
            up = T.matmul(down, T.permute(self.lora.b, (1, 0)))
            y = T.add(y, T.mul(up, self.lora.scale))
        return y

    def register(self, params: dict, prefix: str):
        params[f"{prefix}.weight"] = self.weight
        params[f"{prefix}.bias"] = self.bias


class Mlp:
    """Two linears around an activation; activation picked at build time."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, rng: Rng, act: str = "gelu"):
        self.fc1 = Linear(in_dim, hidden_dim, rng.child("fc1"))
        self.fc2 = Linear(hidden_dim, out_dim, rng.child("fc2"))
        self.act = {"gelu": T.gelu, "silu": T.silu}[act]

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))

    def register(self, params: dict, prefix: str):
        self.fc1.register(params, f"{prefix}.fc1")
        self.fc2.register(params, f"{prefix}.fc2")


def sinusoidal_embedding(values: np.ndarray, dim: int, scale: float = 1000.0) -> np.ndarray:
    """Fixed sin/cos features of scalar inputs; [B] -> [B, dim] float32."""
    if dim % 2:
        raise ContractViolation(f"sinusoidal embedding dim must be even, got {dim}")
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = v[:, None] * scale * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1).astype(np.float32)
