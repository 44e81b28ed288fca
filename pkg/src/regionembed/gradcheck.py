"""Finite-difference validation of the full model's gradients on a tiny float64 config."""

from __future__ import annotations

import numpy as np
import torch

from . import numerics as nx
from .data import RegionDataset, ViewMatrix
from .trainer import ModelConfig, RegionEmbeddingModel

TINY_CONFIG = ModelConfig(
    d=8, d_prime=4, d_m=4, channels=2, heads=2,
    intra_layers=1, inter_layers=1, fusion_layers=1,
)


def tiny_dataset(seed: int = 0, n: int = 8) -> RegionDataset:
    """Random three-view count dataset (mobility, 5 POI and 4 land-use categories)."""
    rng = np.random.default_rng(seed)
    mobility = rng.poisson(3.0, size=(n, n)).astype(np.float64) + np.eye(n)
    poi = rng.poisson(4.0, size=(n, 5)).astype(np.float64)
    land = rng.poisson(4.0, size=(n, 4)).astype(np.float64)
    poi[poi.sum(axis=1) == 0, 0] = 1.0
    land[land.sum(axis=1) == 0, 0] = 1.0
    views = (
        ViewMatrix("mobility", "mobility", mobility),
        ViewMatrix("poi", "count", poi),
        ViewMatrix("landuse", "count", land),
    )
    return RegionDataset(tuple(f"r{i}" for i in range(n)), views)


def run_gradcheck(
    seed: int = 0,
    eps: float = 1e-5,
    tol: float = 1e-4,
    min_samples: int = 200,
    dataset: RegionDataset = None,
    cfg: ModelConfig = TINY_CONFIG,
) -> nx.GradCheckReport:
    dataset = dataset or tiny_dataset(seed)
    model = RegionEmbeddingModel(dataset, cfg, seed=seed).to(torch.float64)
    model.eval()
    # Move beta off its 0.5 initialization so its gradient is not trivially symmetric.
    with torch.no_grad():
        model.halearning.combiner.b.fill_(0.3)
    views = model.inputs(dataset)
    params = dict(model.named_parameters())

    def loss_fn():
        return model.loss(views)[0]

    return nx.finite_difference_check(
        loss_fn, params, eps=eps, tolerance=tol, samples_per_parameter=4, min_samples=min_samples, seed=seed
    )
