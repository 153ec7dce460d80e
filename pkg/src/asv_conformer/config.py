"""Run configuration: JSON files with flat dotted keys."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .conformer import EncoderConfig
from .model import HeadConfig
from .sam import BaseOptConfig, SamConfig
from .train import TrainConfig

DEFAULTS: dict = {
    "model.layers": 6,
    "model.d_model": 256,
    "model.heads": 4,
    "model.ffn_dim": 2048,
    "model.subsample": 4,
    "model.conv_kernel": 15,
    "model.use_lsa": True,
    "model.dropout": 0.1,
    "model.xvec_dim": 256,
    "model.asp_hidden": 128,
    "model.aam_margin": 0.2,
    "model.aam_scale": 32.0,
    "optim.sam_enabled": True,
    "optim.sam_rho": 0.05,
    "optim.peak_lr": 1e-3,
    "optim.warmup_steps": 1000,
    "optim.weight_decay": 0.05,
    "optim.epochs": 30,
    "optim.batch_size": 16,
    # Either a manifest of real/synth audio or a generated corpus.
    "data.manifest": None,
    "data.n_speakers": 20,
    "data.utts_per_speaker": 10,
    "data.utt_seconds": 4.0,
    "data.chunk_len": 300,
    "eval.manifest": None,
    "eval.trials": None,
    "eval.n_speakers": 20,
    "eval.utts_per_speaker": 2,
    "eval.chunk_len": 300,
    "init.checkpoint": None,
    "init.k_blocks": 0,
    "seed": 0,
}

_PATH_KEYS = ("data.manifest", "eval.manifest", "eval.trials", "init.checkpoint")

# Configuration that reaches the held-out EER bar on one CPU thread in minutes.
DESK_SCALE: dict = {
    "model.layers": 2, "model.d_model": 64, "model.heads": 2, "model.ffn_dim": 256,
    "model.dropout": 0.0, "model.xvec_dim": 64, "model.asp_hidden": 32,
    "optim.peak_lr": 2e-3, "optim.warmup_steps": 300, "optim.batch_size": 8, "optim.epochs": 30,
}


class ConfigError(ValueError):
    pass


def _check_type(key: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    return value


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, overrides: dict, base_dir: Path | None = None) -> "RunConfig":
        unknown = sorted(set(overrides) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = dict(DEFAULTS)
        for k, v in overrides.items():
            values[k] = _check_type(k, v, DEFAULTS[k])
        return cls(values, base_dir or Path.cwd())

    def __getitem__(self, key: str):
        return self.values[key]

    def path(self, key: str) -> Path | None:
        v = self.values[key]
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    def check_paths(self) -> None:
        for key in _PATH_KEYS:
            p = self.path(key)
            if p is not None and not p.exists():
                raise FileNotFoundError(f"{key}: file not found: {p}")

    def encoder(self) -> EncoderConfig:
        v = self.values
        return EncoderConfig(layers=v["model.layers"], d_model=v["model.d_model"], heads=v["model.heads"],
                             ffn_dim=v["model.ffn_dim"], subsample=v["model.subsample"],
                             conv_kernel=v["model.conv_kernel"], use_lsa=v["model.use_lsa"],
                             dropout=v["model.dropout"], train_chunk=v["data.chunk_len"])

    def head(self, n_classes: int) -> HeadConfig:
        v = self.values
        return HeadConfig(n_classes, xvec_dim=v["model.xvec_dim"], asp_hidden=v["model.asp_hidden"],
                          aam_margin=v["model.aam_margin"], aam_scale=v["model.aam_scale"])

    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["optim.epochs"], batch_size=v["optim.batch_size"], chunk_len=v["data.chunk_len"],
            sam=SamConfig(rho=v["optim.sam_rho"], enabled=v["optim.sam_enabled"]),
            base=BaseOptConfig(peak_lr=v["optim.peak_lr"], weight_decay=v["optim.weight_decay"],
                               warmup_steps=v["optim.warmup_steps"]))

    def to_dict(self) -> dict:
        return dict(self.values)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object of dotted keys")
    return RunConfig.from_dict(raw, path.parent)
