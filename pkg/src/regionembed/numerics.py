"""Differentiable dense primitives used by the model.

Everything here is a thin, checked wrapper over torch operations.  Each
primitive verifies that its output is finite and raises
:class:`NumericalError` at the op that produced a NaN/Inf, so failures are
never silently propagated through a training step.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
import torch.nn.functional as F

DEFAULT_EPS = 1e-8


class NumericalError(FloatingPointError):
    """A primitive produced a non-finite value."""


class L1NormWarning(RuntimeWarning):
    """An all-zero slice was encountered during L1 normalization."""


def check_finite(x: torch.Tensor, op: str) -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NumericalError(f"{op}: non-finite value in output of shape {tuple(x.shape)}")
    return x


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Compute ``x @ weight (+ bias)`` with ``weight`` stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(
            f"linear: inner dimensions differ ({x.shape[-1]} vs {weight.shape[0]})"
        )
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias shape {tuple(bias.shape)} != ({weight.shape[1]},)")
    y = x @ weight
    if bias is not None:
        y = y + bias
    return check_finite(y, "linear")


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    shifted = x - x.detach().amax(dim=axis, keepdim=True)
    e = torch.exp(shifted)
    return check_finite(e / e.sum(dim=axis, keepdim=True), "softmax")


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    shifted = x - x.detach().amax(dim=axis, keepdim=True)
    out = shifted - torch.log(torch.exp(shifted).sum(dim=axis, keepdim=True))
    return check_finite(out, "log_softmax")


def leaky_relu(x: torch.Tensor, slope: float = 0.2) -> torch.Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu: slope must lie in (0, 1), got {slope}")
    return check_finite(torch.where(x >= 0, x, slope * x), "leaky_relu")


def relu(x: torch.Tensor) -> torch.Tensor:
    return check_finite(torch.clamp(x, min=0.0), "relu")


def layer_norm(
    x: torch.Tensor, gain: torch.Tensor, shift: torch.Tensor, eps: float = DEFAULT_EPS
) -> torch.Tensor:
    """Standardize the last axis (biased variance) then apply gain and shift."""
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    out = centered / torch.sqrt(var + eps) * gain + shift
    return check_finite(out, "layer_norm")


def _as_batched(x: torch.Tensor, op: str) -> torch.Tensor:
    if x.dim() != 3:
        raise ValueError(f"{op}: expected a (channels, h, w) tensor, got shape {tuple(x.shape)}")
    return x.unsqueeze(0)


def conv2d(
    x: torch.Tensor, kernels: torch.Tensor, padding: int = 0, stride: int = 1
) -> torch.Tensor:
    """Cross-correlate a (cin, h, w) input with (cout, cin, k, k) kernels."""
    cin, h, w = x.shape if x.dim() == 3 else (None, None, None)
    xb = _as_batched(x, "conv2d")
    if kernels.dim() != 4 or kernels.shape[1] != cin:
        raise ValueError(
            f"conv2d: kernel shape {tuple(kernels.shape)} incompatible with input channels {cin}"
        )
    k = kernels.shape[-1]
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError(f"conv2d: kernel size {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    out = F.conv2d(xb, kernels, padding=padding, stride=stride)[0]
    return check_finite(out, "conv2d")


def avg_pool2d(x: torch.Tensor, k: int, padding: int = 0, stride: int = 1) -> torch.Tensor:
    """Window means; padded cells are excluded from the count."""
    _, h, w = x.shape if x.dim() == 3 else (None, None, None)
    xb = _as_batched(x, "avg_pool2d")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError(f"avg_pool2d: window {k} exceeds padded input")
    out = F.avg_pool2d(xb, k, stride=stride, padding=padding, count_include_pad=False)[0]
    return check_finite(out, "avg_pool2d")


def l1_normalize(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    denom = x.abs().sum(dim=axis, keepdim=True)
    zero = denom == 0
    if bool(zero.any()):
        warnings.warn(
            f"l1_normalize: {int(zero.sum())} all-zero slice(s); returning zeros",
            L1NormWarning,
            stacklevel=2,
        )
        denom = torch.where(zero, torch.ones_like(denom), denom)
    return check_finite(x / denom, "l1_normalize")


def cosine_similarity(a, b, eps: float = DEFAULT_EPS) -> float:
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError("cosine_similarity: vectors differ in length")
    na = max(float(torch.linalg.vector_norm(a)), eps)
    nb = max(float(torch.linalg.vector_norm(b)), eps)
    return float(a @ b) / (na * nb)


def cosine_matrix(x: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """All-pairs cosine similarity between rows of ``x``."""
    norms = torch.clamp(torch.linalg.vector_norm(x, dim=1), min=eps)
    unit = x / norms[:, None]
    return check_finite(unit @ unit.T, "cosine_matrix")


def dropout(
    x: torch.Tensor,
    rate: float,
    training: bool,
    rng: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode requires an explicit generator")
    keep = torch.rand(x.shape, generator=rng, dtype=x.dtype, device=x.device) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


def glorot_uniform_(t: torch.Tensor, fan_in: int, fan_out: int, rng: torch.Generator) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=rng, dtype=t.dtype) * (2 * bound) - bound)
    return t


@dataclass
class GradCheckEntry:
    parameter: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    eps: float
    tolerance: float
    entries: list = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def worst(self) -> Optional[GradCheckEntry]:
        return max(self.entries, key=lambda e: e.rel_error, default=None)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    @property
    def groups(self) -> set:
        return {e.parameter for e in self.entries}


def relative_error(analytic: float, numeric: float, floor: float = 1e-3) -> float:
    """``|a - f| / max(|a|, |f|, floor)``.

    The floor turns the measure into an absolute one for near-zero
    gradients, where central differences are dominated by round-off.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    parameters: dict,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    samples_per_parameter: int = 4,
    min_samples: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    ``loss_fn`` recomputes the scalar loss from the current parameter values;
    ``parameters`` maps identifiers to float64 leaf tensors.  Coordinates are
    sampled per parameter tensor (every tensor contributes) and topped up
    round-robin until at least ``min_samples`` have been checked.
    """
    for name, p in parameters.items():
        if p.dtype != torch.float64:
            raise ValueError(f"finite_difference_check needs float64 parameters; {name} is {p.dtype}")

    for p in parameters.values():
        p.grad = None
    loss = loss_fn()
    if not bool(torch.isfinite(loss)):
        raise NumericalError("finite_difference_check: non-finite loss")
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in parameters.items()
    }

    gen = torch.Generator().manual_seed(seed)
    chosen: dict = {}
    for name, p in parameters.items():
        take = min(samples_per_parameter, p.numel())
        chosen[name] = torch.randperm(p.numel(), generator=gen)[:take].tolist()
    total = sum(len(v) for v in chosen.values())
    names = list(parameters)
    cursor = 0
    while total < min_samples and any(len(chosen[n]) < parameters[n].numel() for n in names):
        name = names[cursor % len(names)]
        cursor += 1
        p = parameters[name]
        if len(chosen[name]) >= p.numel():
            continue
        remaining = sorted(set(range(p.numel())) - set(chosen[name]))
        pick = remaining[int(torch.randint(len(remaining), (1,), generator=gen))]
        chosen[name].append(pick)
        total += 1

    report = GradCheckReport(eps=eps, tolerance=tolerance)
    with torch.no_grad():
        for name in names:
            p = parameters[name]
            flat = p.view(-1)
            for idx in chosen[name]:
                orig = float(flat[idx])
                flat[idx] = orig + eps
                up = float(loss_fn())
                flat[idx] = orig - eps
                down = float(loss_fn())
                flat[idx] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NumericalError(f"finite_difference_check: non-finite loss perturbing {name}")
                numeric = (up - down) / (2 * eps)
                analytic = float(grads[name].view(-1)[idx])
                report.entries.append(
                    GradCheckEntry(
                        parameter=name,
                        index=tuple(int(i) for i in torch.unravel_index(torch.tensor(idx), p.shape)),
                        analytic=analytic,
                        numeric=numeric,
                        rel_error=relative_error(analytic, numeric),
                    )
                )
    return report
