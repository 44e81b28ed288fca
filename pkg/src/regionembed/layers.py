"""Parameterized building blocks shared by the feature-learning and fusion stacks."""

from __future__ import annotations

import math
from typing import Optional

import torch
from torch import nn

from . import numerics as nx


class Linear(nn.Module):
    """Affine map with the weight stored as (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True, *, rng: torch.Generator):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_features, out_features))
        nx.glorot_uniform_(self.weight, in_features, out_features, rng)
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = nx.DEFAULT_EPS):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.shift = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.layer_norm(x, self.gain, self.shift, self.eps)


class FeedForward(nn.Module):
    """Two-layer perceptron ``Linear -> ReLU -> Linear``."""

    def __init__(self, dim_in: int, hidden: int, dim_out: int, *, rng: torch.Generator):
        super().__init__()
        self.fc1 = Linear(dim_in, hidden, rng=rng)
        self.fc2 = Linear(hidden, dim_out, rng=rng)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(nx.relu(self.fc1(x)))


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product self-attention over the rows (regions) of ``x``.

    Each head uses scaling ``sqrt(d / heads)``; head outputs are concatenated
    and recombined by ``wo``.  ``forward`` returns the recombined output and
    the per-head coefficient tensor of shape (heads, n, n).
    """

    def __init__(self, dim: int, heads: int, *, rng: torch.Generator):
        super().__init__()
        if dim % heads:
            raise ValueError(f"embedding dim {dim} is not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, bias=False, rng=rng)
        self.wk = Linear(dim, dim, bias=False, rng=rng)
        self.wv = Linear(dim, dim, bias=False, rng=rng)
        self.wo = Linear(dim, dim, bias=False, rng=rng)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        n = t.shape[0]
        return t.reshape(n, self.heads, self.head_dim).transpose(0, 1)

    def forward(self, x: torch.Tensor):
        q, k, v = self._split(self.wq(x)), self._split(self.wk(x)), self._split(self.wv(x))
        logits = q @ k.transpose(1, 2) / math.sqrt(self.head_dim)
        nx.check_finite(logits, "attention logits")
        coeffs = nx.softmax(logits, axis=-1)
        heads_out = coeffs @ v
        concat = heads_out.transpose(0, 1).reshape(x.shape[0], -1)
        return self.wo(concat), coeffs


def post_process(
    x: torch.Tensor,
    update: torch.Tensor,
    norm1: LayerNorm,
    mlp: FeedForward,
    norm2: LayerNorm,
    rate: float,
    training: bool,
    rng: Optional[torch.Generator],
) -> torch.Tensor:
    """Residual + dropout + layer norm, then MLP with the same pattern."""
    mid = norm1(x + nx.dropout(update, rate, training, rng))
    return norm2(mid + nx.dropout(mlp(mid), rate, training, rng))
