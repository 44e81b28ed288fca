"""Training objective: feature-similarity terms and the mobility cross-entropy term."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .layers import Linear


class ProjectionHead(nn.Module):
    """``ReLU(Linear(H))``: maps the shared embedding to one loss target."""

    def __init__(self, dim: int, *, rng: torch.Generator):
        super().__init__()
        self.fc = Linear(dim, dim, rng=rng)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return nx.relu(self.fc(h))


@dataclass(frozen=True)
class TransitionTables:
    """Source/destination transition probabilities derived from a trip matrix.

    ``p_s[i, k]`` is the share of trips leaving i that end in k and
    ``p_d[i, k]`` the share of trips entering k that start in i.
    """

    p_s: np.ndarray
    p_d: np.ndarray
    zero_sources: Tuple[int, ...]
    zero_destinations: Tuple[int, ...]


def mobility_transitions(m) -> TransitionTables:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"mobility matrix must be square, got {m.shape}")
    if np.any(m < 0):
        raise ValueError("mobility matrix has negative entries")
    out_flow = m.sum(axis=1)
    in_flow = m.sum(axis=0)
    p_s = np.divide(m, out_flow[:, None], out=np.zeros_like(m), where=out_flow[:, None] > 0)
    p_d = np.divide(m, in_flow[None, :], out=np.zeros_like(m), where=in_flow[None, :] > 0)
    return TransitionTables(
        p_s=p_s,
        p_d=p_d,
        zero_sources=tuple(int(i) for i in np.flatnonzero(out_flow == 0)),
        zero_destinations=tuple(int(k) for k in np.flatnonzero(in_flow == 0)),
    )


def entropy_floor(tables: TransitionTables) -> float:
    """Sum of row entropies of ``p_s`` and column entropies of ``p_d``."""

    def ent(p):
        nz = p > 0
        return float(-(p[nz] * np.log(p[nz])).sum())

    return ent(tables.p_s) + ent(tables.p_d)


def similarity_from_embeddings(h_view: torch.Tensor, cosine: torch.Tensor) -> torch.Tensor:
    """Mean over all ordered pairs of ``|cos(x_i, x_k) - h_i . h_k|``."""
    return (cosine - h_view @ h_view.T).abs().mean()


def feature_similarity_loss(h: torch.Tensor, cosine: torch.Tensor, head: nn.Module) -> torch.Tensor:
    return similarity_from_embeddings(head(h), cosine)


def mobility_kl_from_scores(scores: torch.Tensor, p_s: torch.Tensor, p_d: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of row-softmax (sources) and column-softmax (destinations) of ``scores``."""
    log_ps = nx.log_softmax(scores, axis=1)
    log_pd = nx.log_softmax(scores, axis=0)
    return -(p_s * log_ps).sum() - (p_d * log_pd).sum()


def mobility_kl_loss(h: torch.Tensor, p_s: torch.Tensor, p_d: torch.Tensor, src: nn.Module, dst: nn.Module):
    return mobility_kl_from_scores(src(h) @ dst(h).T, p_s, p_d)


class LossHeads(nn.Module):
    """Per-view loss heads and cached, gradient-free loss targets.

    Mobility views get a source and a destination head and a cross-entropy
    term; every other view gets one head and a similarity term against the
    cosine matrix of its raw feature rows.
    """

    def __init__(self, dataset, dim: int, *, rng: torch.Generator, eps: float = nx.DEFAULT_EPS):
        super().__init__()
        self.names = [view.name for view in dataset.views]
        self.kinds = [view.kind for view in dataset.views]
        self.heads = nn.ModuleDict()
        self.flags: Dict[str, Tuple] = {}
        for view in dataset.views:
            if view.is_mobility:
                self.heads[f"{view.name}_src"] = ProjectionHead(dim, rng=rng)
                self.heads[f"{view.name}_dst"] = ProjectionHead(dim, rng=rng)
                tables = mobility_transitions(view.matrix)
                self.register_buffer(f"{view.name}_ps", torch.from_numpy(tables.p_s.copy()))
                self.register_buffer(f"{view.name}_pd", torch.from_numpy(tables.p_d.copy()))
                self.flags[view.name] = (tables.zero_sources, tables.zero_destinations)
            else:
                self.heads[view.name] = ProjectionHead(dim, rng=rng)
                x = torch.from_numpy(np.array(view.matrix, dtype=np.float64))
                self.register_buffer(f"{view.name}_cos", nx.cosine_matrix(x, eps))

    def forward(self, h: torch.Tensor, weights: Optional[Mapping[str, float]] = None):
        """Returns ``(total, {view name: term})``; weights default to 1."""
        terms: Dict[str, torch.Tensor] = {}
        for name, kind in zip(self.names, self.kinds):
            if kind == "mobility":
                terms[name] = mobility_kl_loss(
                    h,
                    getattr(self, f"{name}_ps"),
                    getattr(self, f"{name}_pd"),
                    self.heads[f"{name}_src"],
                    self.heads[f"{name}_dst"],
                )
            else:
                terms[name] = feature_similarity_loss(h, getattr(self, f"{name}_cos"), self.heads[name])
        weights = weights or {}
        total = sum(float(weights.get(name, 1.0)) * t for name, t in terms.items())
        return nx.check_finite(total, "total loss"), terms


def total_loss(h, heads: LossHeads, weights=None):
    return heads(h, weights)
