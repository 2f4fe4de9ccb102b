"""Per-sample attack-magnitude weights and their latent embedding."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

LOG_FLOOR = math.exp(-10.0)


@dataclass(frozen=True)
class LambdaBatch:
    values: np.ndarray
    n_zero: int
    n_one: int

    @property
    def segments(self) -> list[str]:
        b = len(self.values)
        return ["fixed-0"] * self.n_zero + ["fixed-1"] * self.n_one + ["uniform"] * (b - self.n_zero - self.n_one)

    @property
    def uniform(self) -> np.ndarray:
        return self.values[self.n_zero + self.n_one:]


def sample_lambda(b: int, rng_seed) -> LambdaBatch:
    """First ``b // 4`` entries 0, next ``b // 4`` entries 1, rest U(0, 1)."""
    if b < 1:
        raise ValueError(f"batch size must be >= 1, got {b}")
    q = b // 4
    rng = np.random.default_rng(rng_seed)
    values = np.concatenate([np.zeros(q), np.ones(q), rng.uniform(0.0, 1.0, size=b - 2 * q)])
    return LambdaBatch(values, q, q)


def embedding_input(lam) -> torch.Tensor:
    lam = torch.as_tensor(lam, dtype=torch.float32)
    return -torch.log(lam.clamp_min(LOG_FLOOR))


class LambdaEmbedding(nn.Module):
    """Two-layer MLP from the log-magnitude to the latent space."""

    def __init__(self, latent_dim: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(1, hidden), nn.SiLU(), nn.Linear(hidden, latent_dim))

    def forward(self, lam) -> torch.Tensor:
        return self.net(embedding_input(lam).reshape(-1, 1))


def embed_lambda(z: torch.Tensor, lam, mlp: LambdaEmbedding) -> torch.Tensor:
    emb = mlp(lam)
    if emb.shape[-1] != z.shape[-1]:
        raise ValueError(f"latent dim {z.shape[-1]} does not match embedding dim {emb.shape[-1]}")
    return z + emb.reshape(z.shape) if z.ndim == 1 else z + emb
