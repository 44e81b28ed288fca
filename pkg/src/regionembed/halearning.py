"""Hybrid attentive feature learning.

Per-view intra-view stacks (self-attention whose coefficient matrix is
refined by a small convolutional correlation module), a shared inter-view
stack built on a learnable memory unit, and a learnable scalar that mixes
the two per view.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import torch
from torch import nn

from . import numerics as nx
from .layers import FeedForward, LayerNorm, Linear, MultiHeadSelfAttention, post_process


class RegionSALayer(nn.Module):
    """One intra-view encoder layer with the region-correlation conv path.

    Parameters
    ----------
    n : int
        Number of regions.  The correlation MLP reads rows of the n x n
        coefficient matrix, so the layer is bound to this region count.
    dim : int
        Embedding width d.
    heads : int
        Attention heads; ``dim`` must be divisible by it.
    channels : int
        Conv output channels c.
    kernel : int
        Odd conv kernel size; padding ``(kernel - 1) // 2`` keeps n x n.
    """

    def __init__(
        self,
        n: int,
        dim: int,
        heads: int,
        channels: int,
        kernel: int = 3,
        dropout: float = 0.1,
        *,
        rng: torch.Generator,
    ):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError(f"conv kernel must be odd, got {kernel}")
        self.n = n
        self.kernel = kernel
        self.pool = 3
        self.dropout = dropout
        self.attn = MultiHeadSelfAttention(dim, heads, rng=rng)
        self.conv = nn.Parameter(torch.empty(channels, 1, kernel, kernel))
        nx.glorot_uniform_(self.conv, kernel * kernel, channels * kernel * kernel, rng)
        self.corr_mlp = FeedForward(n, dim, dim, rng=rng)
        self.norm1 = LayerNorm(dim)
        self.mlp = FeedForward(dim, 2 * dim, dim, rng=rng)
        self.norm2 = LayerNorm(dim)

    def correlation(self, a_sv: torch.Tensor):
        """Conv path: returns ``(C_A, A')`` for an n x n coefficient matrix."""
        pad = (self.kernel - 1) // 2
        a_prime = nx.avg_pool2d(
            nx.conv2d(a_sv.unsqueeze(0), self.conv, padding=pad, stride=1),
            self.pool,
            padding=self.pool // 2,
            stride=1,
        )
        weighted = a_prime * nx.softmax(a_prime, axis=-1)
        return self.corr_mlp(weighted.mean(dim=0)), a_prime

    def region_sa(self, x: torch.Tensor):
        """Returns ``(C, A_sv)`` with ``A_sv`` the head-averaged coefficients."""
        if x.shape[0] != self.n:
            raise ValueError(f"layer built for {self.n} regions, got {x.shape[0]}")
        c_v, coeffs = self.attn(x)
        a_sv = coeffs.mean(dim=0)
        c_a, _ = self.correlation(a_sv)
        return c_v + c_a, a_sv

    def forward(self, x: torch.Tensor, rng: Optional[torch.Generator] = None) -> torch.Tensor:
        c, _ = self.region_sa(x)
        return post_process(x, c, self.norm1, self.mlp, self.norm2, self.dropout, self.training, rng)


def region_sa(x: torch.Tensor, layer: RegionSALayer):
    return layer.region_sa(x)


class IntraAFLStack(nn.Module):
    """Input projection of one view followed by ``layers`` RegionSA layers.

    Mobility views are passed through ``log1p`` before the projection.
    """

    def __init__(
        self,
        n: int,
        in_features: int,
        dim: int,
        layers: int,
        heads: int,
        channels: int,
        kernel: int = 3,
        dropout: float = 0.1,
        log_input: bool = False,
        *,
        rng: torch.Generator,
    ):
        super().__init__()
        self.log_input = log_input
        self.proj = Linear(in_features, dim, rng=rng)
        self.layers = nn.ModuleList(
            RegionSALayer(n, dim, heads, channels, kernel, dropout, rng=rng) for _ in range(layers)
        )

    def forward(self, x: torch.Tensor, rng: Optional[torch.Generator] = None) -> torch.Tensor:
        if self.log_input:
            x = torch.log1p(x)
        z = self.proj(x)
        for layer in self.layers:
            z = layer(z, rng)
        return z


def intra_afl_forward(x: torch.Tensor, stack: IntraAFLStack, rng=None) -> torch.Tensor:
    return stack(x, rng)


class InterAFLStack(nn.Module):
    """External attention over the (n, v, d) stack of per-view embeddings.

    Each layer maps d -> d_m through the memory unit, normalizes with a
    softmax across views and an L1 norm across memory slots, then maps
    back d_m -> d.  Layers do not share weights.
    """

    def __init__(self, dim: int, memory: int, layers: int, *, rng: torch.Generator):
        super().__init__()
        if memory < 1:
            raise ValueError("memory size must be >= 1")
        self.memory = nn.ModuleList(Linear(dim, memory, rng=rng) for _ in range(layers))
        self.readout = nn.ModuleList(Linear(memory, dim, rng=rng) for _ in range(layers))

    def forward(self, z_sv: torch.Tensor) -> torch.Tensor:
        z = z_sv
        for mem, out in zip(self.memory, self.readout):
            a_cv = mem(z)
            z = out(nx.l1_normalize(nx.softmax(a_cv, axis=1), axis=-1))
        return z


def inter_afl_forward(z_sv_all: torch.Tensor, stack: InterAFLStack) -> torch.Tensor:
    return stack(z_sv_all)


class ViewCombiner(nn.Module):
    """Global mixing weight ``beta = sigmoid(b)``, initialized at 0.5."""

    def __init__(self):
        super().__init__()
        self.b = nn.Parameter(torch.zeros(()))

    @property
    def beta(self) -> torch.Tensor:
        return torch.sigmoid(self.b)

    def forward(self, z_sv: torch.Tensor, z_cv: torch.Tensor) -> List[torch.Tensor]:
        if z_sv.shape != z_cv.shape:
            raise ValueError(f"shape mismatch {tuple(z_sv.shape)} vs {tuple(z_cv.shape)}")
        beta = self.beta
        mixed = beta * z_sv + (1 - beta) * z_cv
        return [mixed[:, j] for j in range(mixed.shape[1])]


def combine_views(z_sv: torch.Tensor, z_cv: torch.Tensor, combiner: ViewCombiner) -> List[torch.Tensor]:
    return combiner(z_sv, z_cv)


class HALearning(nn.Module):
    """Views in, list of per-view embeddings (n x d each) out."""

    def __init__(
        self,
        n: int,
        view_features: Sequence[int],
        mobility_mask: Sequence[bool],
        dim: int,
        intra_layers: int,
        inter_layers: int,
        heads: int,
        channels: int,
        memory: int,
        kernel: int = 3,
        dropout: float = 0.1,
        *,
        rng: torch.Generator,
    ):
        super().__init__()
        self.intra = nn.ModuleList(
            IntraAFLStack(
                n, f, dim, intra_layers, heads, channels, kernel, dropout, log_input=mob, rng=rng
            )
            for f, mob in zip(view_features, mobility_mask)
        )
        self.inter = InterAFLStack(dim, memory, inter_layers, rng=rng)
        self.combiner = ViewCombiner()

    def forward(self, views: Sequence[torch.Tensor], rng=None):
        z_sv = torch.stack([stack(x, rng) for stack, x in zip(self.intra, views)], dim=1)
        z_cv = self.inter(z_sv)
        return self.combiner(z_sv, z_cv), z_sv, z_cv
