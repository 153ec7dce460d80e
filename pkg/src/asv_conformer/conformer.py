"""Conformer encoder: convolutional subsampling followed by Macaron blocks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import MultiHeadSelfAttention

SUBSAMPLE_STRIDES = {2: (2, 1), 4: (2, 2), 6: (2, 3)}
FRONTEND_KERNEL = 3


@dataclass(frozen=True)
class EncoderConfig:
    layers: int
    d_model: int
    heads: int
    ffn_dim: int = 2048
    subsample: int = 4
    conv_kernel: int = 15
    use_lsa: bool = True
    dropout: float = 0.1
    frontend_channels: int | None = None
    n_mels: int = 80
    train_chunk: int = 300

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("encoder needs at least one layer")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.subsample not in SUBSAMPLE_STRIDES:
            raise ValueError(f"subsample must be one of {sorted(SUBSAMPLE_STRIDES)}, got {self.subsample}")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")

    @property
    def channels(self) -> int:
        return self.frontend_channels or self.d_model

    @property
    def name(self) -> str:
        tag = f"{self.layers}L-{self.d_model}D-{self.heads}H"
        return tag if self.subsample == 4 else f"{tag}-{self.subsample}Sub"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def subsampled_length(frames: int, subsample: int) -> int:
    for stride in SUBSAMPLE_STRIDES[subsample]:
        frames = (frames - FRONTEND_KERNEL) // stride + 1
    return frames


def min_frames(subsample: int) -> int:
    t = 1
    while subsampled_length(t, subsample) < 1:
        t += 1
    return t


class Subsampling(nn.Module):
    """Strided 3x3 conv stages with ReLU, then a linear map to ``d_model``."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.subsample = cfg.subsample
        c = cfg.channels
        convs, in_ch, freq = [], 1, cfg.n_mels
        for stride in SUBSAMPLE_STRIDES[cfg.subsample]:
            convs.append(nn.Conv2d(in_ch, c, FRONTEND_KERNEL, stride))
            in_ch, freq = c, (freq - FRONTEND_KERNEL) // stride + 1
        self.conv = nn.ModuleList(convs)
        self.out = nn.Linear(c * freq, cfg.d_model)

    def forward(self, x: Tensor) -> Tensor:
        # x: (B, T, n_mels)
        if x.shape[-2] < min_frames(self.subsample):
            raise ValueError(f"input of {x.shape[-2]} frames is too short for "
                             f"{self.subsample}x subsampling (needs {min_frames(self.subsample)})")
        h = x.unsqueeze(1)
        for conv in self.conv:
            h = F.relu(conv(h))
        b, c, t, f = h.shape
        return self.out(h.transpose(1, 2).reshape(b, t, c * f))


class FeedForwardHalf(nn.Module):
    """``x + 0.5 * W2 swish(W1 LN(x))``."""

    def __init__(self, d_model: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.w1 = nn.Linear(d_model, ffn_dim)
        self.w2 = nn.Linear(ffn_dim, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        h = self.w2(self.dropout(F.silu(self.w1(self.norm(x)))))
        return x + 0.5 * self.dropout(h)


class ConvModule(nn.Module):
    """Pointwise (2D) -> GLU -> depthwise -> LayerNorm -> swish -> pointwise, residual."""

    def __init__(self, d_model: int, kernel: int, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.pointwise1 = nn.Linear(d_model, 2 * d_model)
        self.depthwise = nn.Conv1d(d_model, d_model, kernel, padding=kernel // 2, groups=d_model)
        self.conv_norm = nn.LayerNorm(d_model)
        self.pointwise2 = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        h = F.glu(self.pointwise1(self.norm(x)), dim=-1)
        h = self.depthwise(h.transpose(-1, -2)).transpose(-1, -2)
        h = self.pointwise2(F.silu(self.conv_norm(h)))
        return x + self.dropout(h)


class ConformerBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.d_model
        self.ffn1 = FeedForwardHalf(d, cfg.ffn_dim, cfg.dropout)
        self.mhsa_norm = nn.LayerNorm(d)
        self.mhsa = MultiHeadSelfAttention(
            d, cfg.heads, use_lsa=cfg.use_lsa,
            init_len=subsampled_length(cfg.train_chunk, cfg.subsample), dropout=cfg.dropout)
        self.conv = ConvModule(d, cfg.conv_kernel, cfg.dropout)
        self.ffn2 = FeedForwardHalf(d, cfg.ffn_dim, cfg.dropout)
        self.final_norm = nn.LayerNorm(d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: Tensor) -> Tensor:
        x = self.ffn1(x)
        x = x + self.dropout(self.mhsa(self.mhsa_norm(x)))
        x = self.conv(x)
        x = self.ffn2(x)
        return self.final_norm(x)


class ConformerEncoder(nn.Module):
    """Frame-level encoder; ``(B, T, n_mels) -> (B, T', d_model)``."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.frontend = Subsampling(cfg)
        self.block = nn.ModuleList(ConformerBlock(cfg) for _ in range(cfg.layers))
        self.final_norm = nn.LayerNorm(cfg.d_model)
        init_weights(self)

    def forward(self, feats: Tensor) -> Tensor:
        squeeze = feats.dim() == 2
        x = self.frontend(feats.unsqueeze(0) if squeeze else feats)
        for blk in self.block:
            x = blk(x)
        x = self.final_norm(x)
        return x.squeeze(0) if squeeze else x


def init_weights(module: nn.Module) -> None:
    """Xavier-uniform matrices and conv kernels, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d, nn.Conv2d)):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
