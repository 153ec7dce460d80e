"""Sharpness-aware minimisation over an AdamW (or SGD) base optimiser."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
from torch import Tensor


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.05
    enabled: bool = True
    norm_floor: float = 1e-12

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError(f"rho must be non-negative, got {self.rho}")


@dataclass(frozen=True)
class BaseOptConfig:
    peak_lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup_steps: int = 1000
    total_steps: int = 100000

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def lr_at(step: int, c: BaseOptConfig) -> float:
    """Linear warmup to ``peak_lr`` then inverse-square-root decay (steps count from 1)."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    if c.warmup_steps <= 0:
        return c.peak_lr
    if step <= c.warmup_steps:
        return c.peak_lr * step / c.warmup_steps
    return c.peak_lr * math.sqrt(c.warmup_steps / step)


def global_norm(tensors: Sequence[Tensor]) -> Tensor:
    return torch.sqrt(sum(torch.sum(t * t) for t in tensors))


def sam_perturb(params: Sequence[Tensor], grads: Sequence[Tensor], rho: float,
                norm_floor: float = 1e-12) -> list[Tensor]:
    """Ascent step ``rho * g / ||g||`` using the norm over all parameters jointly."""
    if not all(bool(torch.isfinite(g).all()) for g in grads):
        raise FloatingPointError("non-finite gradient in SAM perturbation")
    norm = global_norm(grads)
    if rho == 0 or float(norm) < norm_floor:
        return [torch.zeros_like(p) for p in params]
    return [g * (rho / norm) for g in grads]


@dataclass
class AdamWState:
    exp_avg: list[Tensor]
    exp_avg_sq: list[Tensor]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamWState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adamw_step(params: Sequence[Tensor], grads: Sequence[Tensor], state: AdamWState,
               c: BaseOptConfig, lr: float) -> None:
    """Decoupled weight decay Adam, in place; bias-corrected moments."""
    if len(state.exp_avg) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    state.step += 1
    b1, b2 = c.betas
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        p.mul_(1 - lr * c.weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v.sqrt() / math.sqrt(bc2)).add_(c.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)


class AdamW:
    def __init__(self, params: Sequence[Tensor], c: BaseOptConfig):
        self.params = list(params)
        self.config = c
        self.state = AdamWState.zeros_like(self.params)

    def step(self, grads: Sequence[Tensor], lr: float) -> None:
        adamw_step(self.params, grads, self.state, self.config, lr)


class SGD:
    """Plain gradient descent; no momentum, no decay."""

    def __init__(self, params: Sequence[Tensor]):
        self.params = list(params)

    @torch.no_grad()
    def step(self, grads: Sequence[Tensor], lr: float) -> None:
        for p, g in zip(self.params, grads):
            p.sub_(g, alpha=lr)


def loss_and_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> tuple[Tensor, list[Tensor]]:
    with torch.enable_grad():
        loss = loss_fn()
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    return loss.detach(), [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@dataclass
class SamStepResult:
    loss: Tensor
    perturbed_loss: Tensor | None = None
    grads: list[Tensor] = field(default_factory=list)


def sam_step(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], sam: SamConfig,
             base, lr: float) -> SamStepResult:
    """One optimisation step.

    With SAM enabled: gradient at ``w``, move to ``w + eps``, gradient there,
    restore ``w`` exactly, then hand the second gradient to ``base``.
    ``loss_fn`` must recompute the loss from the current parameter values.
    """
    loss, grads = loss_and_grads(loss_fn, params)
    if not sam.enabled:
        base.step(grads, lr)
        return SamStepResult(loss, None, grads)
    eps = sam_perturb(params, grads, sam.rho, sam.norm_floor)
    saved = [p.detach().clone() for p in params]
    with torch.no_grad():
        for p, e in zip(params, eps):
            p.add_(e)
    perturbed_loss, grads = loss_and_grads(loss_fn, params)
    with torch.no_grad():
        for p, w in zip(params, saved):
            p.copy_(w)
    base.step(grads, lr)
    return SamStepResult(loss, perturbed_loss, grads)
