"""Rotary position embedding and (length-scaled) multi-head self-attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

ROTARY_BASE = 10000.0


@dataclass
class AttentionOutput:
    values: Tensor
    weights: Tensor


def rotary_embed(x: Tensor, base: float = ROTARY_BASE, offset: int = 0) -> Tensor:
    """Rotate each pair ``(x[t, 2k], x[t, 2k+1])`` by ``(t + offset) * base**(-2k/d)``.

    ``x`` is ``(..., n, d)``; positions run along the second-to-last axis.
    """
    n, d = x.shape[-2], x.shape[-1]
    if d % 2:
        raise ValueError(f"rotary embedding needs an even feature size, got {d}")
    inv_freq = base ** (-torch.arange(0, d, 2, dtype=x.dtype, device=x.device) / d)
    pos = torch.arange(offset, offset + n, dtype=x.dtype, device=x.device)
    angle = pos[:, None] * inv_freq[None, :]
    cos, sin = torch.cos(angle), torch.sin(angle)
    even, odd = x[..., 0::2], x[..., 1::2]
    return torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1).flatten(-2)


def _attend(q: Tensor, k: Tensor, v: Tensor, scale) -> AttentionOutput:
    if q.shape[-2] == 0:
        raise ValueError("attention over an empty sequence")
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"mismatched attention shapes {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    logits = scale * (q @ k.transpose(-2, -1))
    weights = torch.softmax(logits, dim=-1)
    return AttentionOutput(weights @ v, weights)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> AttentionOutput:
    """``softmax(Q K^T / sqrt(d)) V``."""
    return _attend(q, k, v, 1.0 / math.sqrt(q.shape[-1]))


def length_scaled_attention(q: Tensor, k: Tensor, v: Tensor, s) -> AttentionOutput:
    """``softmax(log(n) / (s * sqrt(d)) * Q K^T) V`` with ``n`` the sequence length.

    ``s`` may be a float or a (differentiable) scalar tensor.
    """
    value = float(s.detach() if torch.is_tensor(s) else s)
    if value <= 0:
        raise ValueError(f"length-scaled attention temperature must be positive, got {value}")
    n, d = q.shape[-2], q.shape[-1]
    return _attend(q, k, v, math.log(n) / (s * math.sqrt(d)))


class MultiHeadSelfAttention(nn.Module):
    """Self-attention with rotary Q/K and optional length scaling.

    The temperature is stored as ``lsa_log_scale`` so that ``s = exp(.)``
    stays positive; it is initialised to ``log(log(init_len))`` which makes
    the layer start out identical to plain attention at that length.
    """

    def __init__(self, d_model: int, heads: int, use_lsa: bool = True, init_len: int = 74,
                 dropout: float = 0.0, rotary: bool = True):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
        self.heads = heads
        self.head_dim = d_model // heads
        self.use_lsa = use_lsa
        self.rotary = rotary
        self.w_q = nn.Linear(d_model, d_model)
        self.w_k = nn.Linear(d_model, d_model)
        self.w_v = nn.Linear(d_model, d_model)
        self.w_o = nn.Linear(d_model, d_model)
        if use_lsa:
            self.lsa_log_scale = nn.Parameter(torch.tensor(math.log(math.log(max(init_len, 2)))))
        self.dropout = nn.Dropout(dropout)
        self.last_weights: Tensor | None = None
        self._cache = None

    @property
    def temperature(self) -> Tensor:
        return torch.exp(self.lsa_log_scale)

    def _split(self, x: Tensor) -> Tensor:
        return x.unflatten(-1, (self.heads, self.head_dim)).transpose(-3, -2)

    def forward(self, x: Tensor, offset: int = 0) -> Tensor:
        q, k, v = self._split(self.w_q(x)), self._split(self.w_k(x)), self._split(self.w_v(x))
        if self.rotary:
            q, k = rotary_embed(q, offset=offset), rotary_embed(k, offset=offset)
        if self.use_lsa:
            s = self.temperature
            if not 0 < float(s.detach()) < math.inf:
                raise FloatingPointError(f"attention temperature left the positive finite range ({float(s.detach())})")
            att = length_scaled_attention(q, k, v, s)
        else:
            att = scaled_dot_attention(q, k, v)
        self.last_weights = att.weights.detach()
        out = self.dropout(att.values).transpose(-3, -2).flatten(-2)
        return self.w_o(out)


def mhsa_forward(x: Tensor, attn: MultiHeadSelfAttention, offset: int = 0) -> Tensor:
    """Run ``attn`` on a detached copy of ``x`` and keep the graph for :func:`mhsa_backward`."""
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        out = attn(x, offset=offset)
    attn._cache = (x, out)
    return out.detach()


def mhsa_backward(attn: MultiHeadSelfAttention, grad_output: Tensor) -> dict[str, Tensor]:
    """Gradients of ``<grad_output, forward output>`` w.r.t. ``x`` and every parameter.

    The ``"lsa_s"`` entry is the derivative w.r.t. the temperature ``s``
    itself (chain rule through the log parameterisation).
    """
    if attn._cache is None:
        raise RuntimeError("mhsa_backward called without a cached mhsa_forward")
    x, out = attn._cache
    names, params = zip(*attn.named_parameters())
    grads = torch.autograd.grad(out, (x, *params), grad_output, retain_graph=True)
    result = {"x": grads[0], **dict(zip(names, grads[1:]))}
    if attn.use_lsa:
        result["lsa_s"] = result["lsa_log_scale"] / attn.temperature.detach()
    return result
