"""Model assembly and the full-batch Adam training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional, TextIO

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .dafusion import DAFusion
from .data import RegionDataset
from .halearning import HALearning
from .objective import LossHeads

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 144
    d_prime: int = 64
    d_m: int = 72
    channels: int = 32
    heads: int = 4
    intra_layers: int = 3
    inter_layers: int = 3
    fusion_layers: int = 3
    dropout: float = 0.1
    leaky_slope: float = 0.2
    conv_kernel: int = 3

    def __post_init__(self):
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        for name in ("d", "d_prime", "d_m", "channels", "inter_layers", "fusion_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.intra_layers < 0:
            raise ConfigError("intra_layers must be >= 0")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be a positive odd integer")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError("leaky_slope must lie in (0, 1)")

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in names})


@dataclass
class TrainConfig:
    epochs: int = 2500
    learning_rate: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: Optional[float] = None
    seed: int = 0
    loss_weights: Dict[str, float] = field(default_factory=dict)
    checkpoint_every: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be one of {sorted(DTYPES)}")

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.precision]

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in names})


@dataclass
class ForwardOutput:
    h: torch.Tensor
    views: List[torch.Tensor]
    z_sv: torch.Tensor
    z_cv: torch.Tensor
    fused: torch.Tensor
    alpha: torch.Tensor
    beta: torch.Tensor


class RegionEmbeddingModel(nn.Module):
    """All learnable parameters: feature learning, fusion and loss heads.

    The model is transductive: the correlation MLP inside every intra-view
    layer has input width n, so it only serves the region set it was built for.
    """

    def __init__(self, dataset: RegionDataset, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.n = dataset.n
        rng = torch.Generator().manual_seed(seed)
        self.halearning = HALearning(
            n=dataset.n,
            view_features=[view.matrix.shape[1] for view in dataset.views],
            mobility_mask=[view.is_mobility for view in dataset.views],
            dim=cfg.d,
            intra_layers=cfg.intra_layers,
            inter_layers=cfg.inter_layers,
            heads=cfg.heads,
            channels=cfg.channels,
            memory=cfg.d_m,
            kernel=cfg.conv_kernel,
            dropout=cfg.dropout,
            rng=rng,
        )
        self.dafusion = DAFusion(
            cfg.d, cfg.d_prime, cfg.heads, cfg.fusion_layers, cfg.dropout, cfg.leaky_slope, rng=rng
        )
        self.loss_heads = LossHeads(dataset, cfg.d, rng=rng)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def inputs(self, dataset: RegionDataset) -> List[torch.Tensor]:
        if dataset.n != self.n:
            raise ValueError(f"model built for {self.n} regions, dataset has {dataset.n}")
        return [torch.tensor(view.matrix, dtype=self.dtype) for view in dataset.views]

    def forward(self, views: List[torch.Tensor], rng: Optional[torch.Generator] = None) -> ForwardOutput:
        zs, z_sv, z_cv = self.halearning(views, rng)
        h, fused, alpha = self.dafusion(zs, rng)
        return ForwardOutput(h, zs, z_sv, z_cv, fused, alpha, self.halearning.combiner.beta)

    def loss(self, views, weights=None, rng=None):
        out = self.forward(views, rng)
        total, terms = self.loss_heads(out.h, weights)
        return total, terms, out

    @torch.no_grad()
    def embed(self, dataset: RegionDataset) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            return self.forward(self.inputs(dataset)).h.detach().cpu().numpy().astype(np.float64)
        finally:
            self.train(was_training)


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(
    params: Dict[str, torch.Tensor],
    grads: Dict[str, torch.Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One in-place Adam update with bias correction; parameters are updated in name order."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in sorted(params):
        p, g = params[name], grads[name]
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return state


class TrainingAborted(nx.NumericalError):
    def __init__(self, epoch: int, terms: Dict[str, float], reason: str):
        super().__init__(f"epoch {epoch}: {reason}; terms={terms}")
        self.epoch = epoch
        self.terms = terms


@dataclass
class TrainResult:
    model: RegionEmbeddingModel
    history: List[dict]
    embeddings: np.ndarray
    epochs: int
    seconds: float

    @property
    def initial_loss(self) -> float:
        return self.history[0]["total"]

    @property
    def final_loss(self) -> float:
        return self.history[-1]["total"]


def build_model(dataset: RegionDataset, model_cfg: ModelConfig, train_cfg: TrainConfig) -> RegionEmbeddingModel:
    model = RegionEmbeddingModel(dataset, model_cfg, seed=train_cfg.seed)
    return model.to(train_cfg.dtype)


def train(
    dataset: RegionDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    log_file: Optional[TextIO] = None,
    on_epoch: Optional[Callable[[int, RegionEmbeddingModel], None]] = None,
) -> TrainResult:
    """Full-batch training.  One JSON line per epoch goes to ``log_file``.

    The logged loss of epoch ``e`` is the loss evaluated before that
    epoch's update.
    """
    torch.manual_seed(train_cfg.seed)
    model = build_model(dataset, model_cfg, train_cfg)
    views = model.inputs(dataset)
    dropout_rng = torch.Generator().manual_seed(train_cfg.seed + 1)
    params = dict(model.named_parameters())
    state = AdamState()
    history: List[dict] = []
    start = time.perf_counter()
    model.train()
    for epoch in range(1, train_cfg.epochs + 1):
        for p in params.values():
            p.grad = None
        try:
            total, terms, out = model.loss(views, train_cfg.loss_weights, dropout_rng)
        except nx.NumericalError as exc:
            raise TrainingAborted(epoch, {}, str(exc)) from exc
        term_values = {k: float(v.detach()) for k, v in terms.items()}
        total.backward()
        grads = {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in params.items()}
        if not all(bool(torch.isfinite(g).all()) for g in grads.values()):
            raise TrainingAborted(epoch, term_values, "non-finite gradient")
        if train_cfg.weight_decay:
            grads = {k: g + train_cfg.weight_decay * params[k].detach() for k, g in grads.items()}
        if train_cfg.grad_clip:
            norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values()))
            if float(norm) > train_cfg.grad_clip:
                grads = {k: g * (train_cfg.grad_clip / float(norm)) for k, g in grads.items()}
        adam_step(
            params, grads, state, train_cfg.learning_rate,
            train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps,
        )
        record = {
            "epoch": epoch,
            "total": float(total.detach()),
            "terms": term_values,
            "alpha": [float(a) for a in out.alpha.detach()],
            "beta": float(out.beta.detach()),
        }
        history.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
        if on_epoch is not None:
            on_epoch(epoch, model)
        if epoch == 1 or epoch % 100 == 0:
            log.debug("epoch %d total %.6g", epoch, record["total"])
    seconds = time.perf_counter() - start
    model.eval()
    return TrainResult(model, history, model.embed(dataset), train_cfg.epochs, seconds)


def config_dict(model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    return {"model": asdict(model_cfg), "train": asdict(train_cfg)}
