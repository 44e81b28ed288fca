"""Dual-feature attentive fusion: view-level weighting, then region-level self-attention."""

from __future__ import annotations

from typing import List, Optional, Sequence

import torch
from torch import nn

from . import numerics as nx
from .layers import FeedForward, LayerNorm, MultiHeadSelfAttention, post_process


class ViewFusion(nn.Module):
    """Learns one softmax weight per view and fuses the view embeddings.

    ``w_f`` has shape (d', d) and ``a`` has length 2d'.  For region i and
    views j, k the score is ``leaky(a . [W_F z_i^j || W_F z_i^k])``; the
    scores are summed over k, averaged over regions and softmaxed over j.
    """

    def __init__(self, dim: int, latent: int, slope: float = 0.2, *, rng: torch.Generator):
        super().__init__()
        self.latent = latent
        self.slope = slope
        self.w_f = nn.Parameter(torch.empty(latent, dim))
        nx.glorot_uniform_(self.w_f, dim, latent, rng)
        self.a = nn.Parameter(torch.empty(2 * latent))
        nx.glorot_uniform_(self.a, 2 * latent, 1, rng)

    def weights(self, zs: Sequence[torch.Tensor]) -> torch.Tensor:
        proj = torch.stack([z @ self.w_f.T for z in zs], dim=1)  # n, v, d'
        left = proj @ self.a[: self.latent]
        right = proj @ self.a[self.latent :]
        pair = nx.leaky_relu(left[:, :, None] + right[:, None, :], self.slope)  # n, j, k
        n = pair.shape[0]
        return nx.softmax(pair.sum(dim=(0, 2)) / n, axis=0)

    def forward(self, zs: Sequence[torch.Tensor]):
        if len(zs) < 1:
            raise ValueError("view fusion needs at least one view")
        alpha = self.weights(zs)
        fused = sum(alpha[j] * z for j, z in enumerate(zs))
        return fused, alpha


def view_fusion(zs: Sequence[torch.Tensor], params: ViewFusion):
    return params(zs)


class RegionFusionLayer(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.1, *, rng: torch.Generator):
        super().__init__()
        self.dropout = dropout
        self.attn = MultiHeadSelfAttention(dim, heads, rng=rng)
        self.norm1 = LayerNorm(dim)
        self.mlp = FeedForward(dim, 2 * dim, dim, rng=rng)
        self.norm2 = LayerNorm(dim)

    def forward(self, z: torch.Tensor, rng: Optional[torch.Generator] = None):
        update, coeffs = self.attn(z)
        out = post_process(z, update, self.norm1, self.mlp, self.norm2, self.dropout, self.training, rng)
        return out, coeffs


class RegionFusion(nn.Module):
    def __init__(self, dim: int, heads: int, layers: int, dropout: float = 0.1, *, rng: torch.Generator):
        super().__init__()
        if layers < 1:
            raise ValueError("region fusion needs at least one layer")
        self.layers = nn.ModuleList(RegionFusionLayer(dim, heads, dropout, rng=rng) for _ in range(layers))

    def forward(self, z: torch.Tensor, rng=None, return_attention: bool = False):
        maps: List[torch.Tensor] = []
        for layer in self.layers:
            z, coeffs = layer(z, rng)
            maps.append(coeffs)
        return (z, maps) if return_attention else z


def region_fusion_forward(z: torch.Tensor, fusion: RegionFusion, rng=None) -> torch.Tensor:
    return fusion(z, rng)


class DAFusion(nn.Module):
    def __init__(
        self,
        dim: int,
        latent: int,
        heads: int,
        layers: int,
        dropout: float = 0.1,
        slope: float = 0.2,
        *,
        rng: torch.Generator,
    ):
        super().__init__()
        self.view = ViewFusion(dim, latent, slope, rng=rng)
        self.region = RegionFusion(dim, heads, layers, dropout, rng=rng)

    def forward(self, zs: Sequence[torch.Tensor], rng=None):
        fused, alpha = self.view(zs)
        return self.region(fused, rng), fused, alpha
