"""Attentive statistics pooling, x-vector projection and AAM-softmax."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

VAR_EPS = 1e-8


def attentive_stats_pool(h: Tensor, attn_w: Tensor, attn_b: Tensor, attn_v: Tensor,
                         eps: float = VAR_EPS) -> tuple[Tensor, Tensor]:
    """Attention-weighted mean and standard deviation over frames.

    Args:
        h: ``(..., T, D)`` frame representations.
        attn_w: ``(D, A)``; attn_b, attn_v: ``(A,)``.

    Returns:
        ``(..., 2D)`` concatenated ``[mu, sigma]`` and the ``(..., T)`` frame weights.
    """
    if h.shape[-2] == 0:
        raise ValueError("cannot pool an empty frame sequence")
    scores = torch.tanh(h @ attn_w + attn_b) @ attn_v
    alpha = torch.softmax(scores, dim=-1)
    mu = torch.einsum("...t,...td->...d", alpha, h)
    second = torch.einsum("...t,...td->...d", alpha, h * h)
    sigma = torch.sqrt(torch.clamp(second - mu * mu, min=eps))
    return torch.cat((mu, sigma), dim=-1), alpha


class AttentiveStatsPool(nn.Module):
    def __init__(self, d_model: int, hidden: int = 128):
        super().__init__()
        self.attn_w = nn.Parameter(torch.empty(d_model, hidden))
        self.attn_b = nn.Parameter(torch.zeros(hidden))
        self.attn_v = nn.Parameter(torch.empty(hidden))
        nn.init.xavier_uniform_(self.attn_w)
        nn.init.uniform_(self.attn_v, -1 / math.sqrt(hidden), 1 / math.sqrt(hidden))

    def forward(self, h: Tensor) -> Tensor:
        return attentive_stats_pool(h, self.attn_w, self.attn_b, self.attn_v)[0]


def project_xvector(pooled: Tensor, proj: Tensor) -> Tensor:
    """Bias-free linear map ``(..., 2D) @ (2D, E)``."""
    if pooled.shape[-1] != proj.shape[0]:
        raise ValueError(f"pooled size {pooled.shape[-1]} does not match projection {tuple(proj.shape)}")
    return pooled @ proj


def margin_logits(cosine: Tensor, labels: Tensor, margin: float, scale: float) -> Tensor:
    """Scaled logits with ``cos(theta_y + m)`` on the target column.

    Beyond ``theta_y + m > pi`` the logit falls back to ``cos(theta) - m sin(m)``
    so it stays monotone in ``theta``.
    """
    target = cosine.gather(-1, labels[..., None])
    sin_sq = 1.0 - target * target
    positive = sin_sq > 0
    # double-where keeps the sqrt gradient finite at theta == 0
    sine = torch.where(positive, torch.sqrt(torch.where(positive, sin_sq, torch.ones_like(sin_sq))),
                       torch.zeros_like(sin_sq))
    phi = target * math.cos(margin) - sine * math.sin(margin)
    phi = torch.where(target > math.cos(math.pi - margin), phi, target - margin * math.sin(margin))
    logits = cosine.scatter(-1, labels[..., None], phi)
    return scale * logits


def aam_softmax_loss(xvec: Tensor, labels: Tensor, class_weights: Tensor, margin: float = 0.2,
                     scale: float = 32.0) -> Tensor:
    """Mean additive-angular-margin cross-entropy.

    Args:
        xvec: ``(B, E)`` or ``(E,)`` embeddings.
        labels: matching ``(B,)`` or scalar class ids.
        class_weights: ``(E, C)``; columns are normalised on use.
    """
    if not 0 <= margin < math.pi / 2:
        raise ValueError(f"margin must lie in [0, pi/2), got {margin}")
    if scale <= 0:
        raise ValueError("scale must be positive")
    single = xvec.dim() == 1
    if single:
        xvec, labels = xvec[None], torch.as_tensor(labels).reshape(1)
    norms = xvec.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm x-vector has no direction")
    if bool((labels >= class_weights.shape[1]).any()) or bool((labels < 0).any()):
        raise ValueError("label out of range")
    cosine = (xvec / norms) @ F.normalize(class_weights, dim=0)
    return F.cross_entropy(margin_logits(cosine, labels, margin, scale), labels)


class AAMSoftmax(nn.Module):
    def __init__(self, xvec_dim: int, n_classes: int, margin: float = 0.2, scale: float = 32.0):
        super().__init__()
        self.margin, self.scale = margin, scale
        self.class_weights = nn.Parameter(torch.empty(xvec_dim, n_classes))
        nn.init.xavier_uniform_(self.class_weights)

    def forward(self, xvec: Tensor, labels: Tensor) -> Tensor:
        return aam_softmax_loss(xvec, labels, self.class_weights, self.margin, self.scale)
