"""Speaker embedding extractor: conformer encoder + pooling head + AAM loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
from torch import Tensor, nn

from .conformer import ConformerEncoder, EncoderConfig
from .pooling import AAMSoftmax, AttentiveStatsPool, project_xvector

VOXCELEB2_SPEAKERS = 5994


@dataclass(frozen=True)
class HeadConfig:
    n_classes: int
    xvec_dim: int = 256
    asp_hidden: int = 128
    aam_margin: float = 0.2
    aam_scale: float = 32.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class SpeakerModel(nn.Module):
    def __init__(self, enc: EncoderConfig, head: HeadConfig):
        super().__init__()
        self.enc_cfg, self.head_cfg = enc, head
        self.encoder = ConformerEncoder(enc)
        self.pool = AttentiveStatsPool(enc.d_model, head.asp_hidden)
        self.proj = nn.Parameter(torch.empty(2 * enc.d_model, head.xvec_dim))
        nn.init.xavier_uniform_(self.proj)
        self.loss = AAMSoftmax(head.xvec_dim, head.n_classes, head.aam_margin, head.aam_scale)

    def forward(self, feats: Tensor) -> Tensor:
        """``(B, T, n_mels)`` or ``(T, n_mels)`` features to x-vectors."""
        return project_xvector(self.pool(self.encoder(feats)), self.proj)

    def compute_loss(self, feats: Tensor, labels: Tensor) -> Tensor:
        return self.loss(self(feats), labels)

    def config_dict(self) -> dict:
        return {"encoder": self.enc_cfg.to_dict(), "head": self.head_cfg.to_dict()}

    @classmethod
    def from_config_dict(cls, d: dict) -> "SpeakerModel":
        return cls(EncoderConfig.from_dict(d["encoder"]), HeadConfig.from_dict(d["head"]))


def param_count(enc: EncoderConfig, head: HeadConfig) -> int:
    """Trainable scalars in encoder, pooling, projection and loss weights."""
    with torch.device("meta"):
        model = SpeakerModel(enc, head)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


REFERENCE_CONFIGS = {
    "6L-256D-4H": EncoderConfig(layers=6, d_model=256, heads=4),
    "6L-256D-4H-2Sub": EncoderConfig(layers=6, d_model=256, heads=4, subsample=2),
    "12L-256D-4H": EncoderConfig(layers=12, d_model=256, heads=4),
    "6L-512D-8H": EncoderConfig(layers=6, d_model=512, heads=8),
}

REFERENCE_PARAMS = {"6L-256D-4H": 18.8e6, "6L-256D-4H-2Sub": 22.5e6,
                 "12L-256D-4H": 34.2e6, "6L-512D-8H": 46.4e6}
