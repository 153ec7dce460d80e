"""End-to-end runs assembled from a :class:`RunConfig`."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig
from .features import cmn, load_audio, mel_filterbank, read_manifest
from .model import SpeakerModel
from .scoring import DetMetrics
from .train import LossRow, build_model, heldout_metrics, seed_streams, train_speaker_model
from .transfer import ParamStore, load_checkpoint, transfer_encoder

log = logging.getLogger(__name__)

HELDOUT_SPEAKER_OFFSET = 1000


@dataclass
class Dataset:
    utt_ids: list[str]
    speakers: list[str]
    feats: list[np.ndarray]

    def labels(self) -> tuple[list[int], list[str]]:
        names = sorted(set(self.speakers))
        index = {s: i for i, s in enumerate(names)}
        return [index[s] for s in self.speakers], names


def synth_rows(n_speakers: int, utts_per_speaker: int, seconds: float, corpus_seed: int,
               speaker_offset: int = 0) -> list[tuple[str, str, str]]:
    """Manifest rows whose sources regenerate a synthetic corpus on load."""
    rows = []
    for i in range(n_speakers):
        spk = speaker_offset + i
        for j in range(utts_per_speaker):
            src = f"synth:seed={corpus_seed},speaker={spk},utt={j},seconds={seconds}"
            rows.append((f"spk{spk:04d}-{j:03d}", f"spk{spk:04d}", src))
    return rows


def load_rows(rows, base_dir: Path | None = None) -> Dataset:
    feats = [cmn(mel_filterbank(load_audio(src, base_dir))) for _, _, src in rows]
    return Dataset([u for u, _, _ in rows], [s for _, s, _ in rows], feats)


def train_rows(cfg: RunConfig) -> list[tuple[str, str, str]]:
    if cfg["data.manifest"] is not None:
        return read_manifest(cfg.path("data.manifest"))
    corpus_seed = seed_streams(cfg["seed"])[0]
    return synth_rows(cfg["data.n_speakers"], cfg["data.utts_per_speaker"], cfg["data.utt_seconds"],
                      corpus_seed)


def eval_rows(cfg: RunConfig) -> list[tuple[str, str, str]]:
    """Held-out rows: the eval manifest, or unseen synthetic speakers from the corpus seed."""
    if cfg["eval.manifest"] is not None:
        return read_manifest(cfg.path("eval.manifest"))
    corpus_seed = seed_streams(cfg["seed"])[0]
    return synth_rows(cfg["eval.n_speakers"], cfg["eval.utts_per_speaker"], cfg["data.utt_seconds"],
                      corpus_seed, HELDOUT_SPEAKER_OFFSET)


def _dataset_dir(cfg: RunConfig, key: str) -> Path:
    p = cfg.path(key)
    return p.parent if p is not None else cfg.base_dir


def new_model(cfg: RunConfig, n_classes: int) -> SpeakerModel:
    _, init_seed, _, _ = seed_streams(cfg["seed"])
    model = build_model(cfg.encoder(), cfg.head(n_classes), init_seed)
    if cfg["init.checkpoint"] is not None and cfg["init.k_blocks"] > 0:
        transfer_encoder(load_checkpoint(cfg.path("init.checkpoint")), model, cfg["init.k_blocks"])
    return model


def run_training(cfg: RunConfig, train: Dataset | None = None, heldout: Dataset | None = None,
                 on_metrics: Callable[[int, DetMetrics], bool | None] | None = None
                 ) -> tuple[SpeakerModel, list[LossRow], list[str]]:
    """Train a speaker model as configured.

    With ``heldout`` given, held-out EER/minDCF is computed after every
    epoch and passed to ``on_metrics``; a True return stops training.
    """
    cfg.check_paths()
    if train is None:
        train = load_rows(train_rows(cfg), _dataset_dir(cfg, "data.manifest"))
    labels, names = train.labels()
    if len(names) < 2:
        raise ValueError("training data needs at least two speakers")
    _, _, chunk_seed, dropout_seed = seed_streams(cfg["seed"])
    model = new_model(cfg, len(names))

    def on_epoch(epoch, m):
        if heldout is None:
            return None
        met = heldout_metrics(m, heldout.feats, heldout.speakers, cfg["eval.chunk_len"])
        log.info("epoch %d held-out eer %.4f min_dcf %.4f", epoch, met.eer, met.min_dcf)
        return on_metrics(epoch, met) if on_metrics is not None else None

    rows = train_speaker_model(model, train.feats, labels, cfg.train(), chunk_seed, dropout_seed, on_epoch)
    return model, rows, names


def model_store(model: SpeakerModel, cfg: RunConfig | None, speakers: list[str]) -> ParamStore:
    meta = {"task": "speaker_verification", "model": model.config_dict(), "speakers": speakers}
    if cfg is not None:
        meta["config"] = cfg.to_dict()
    return ParamStore.from_module(model, meta)


def model_from_store(store: ParamStore) -> SpeakerModel:
    if "model" not in store.metadata:
        raise ValueError("checkpoint has no speaker-model configuration in its metadata")
    model = SpeakerModel.from_config_dict(store.metadata["model"])
    store.load_into(model)
    model.eval()
    return model


def write_loss_log(path, rows: list[LossRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "step", "loss", "lr"])
        for r in rows:
            w.writerow([r.epoch, r.step, repr(r.loss), repr(r.lr)])


def read_loss_log(path) -> list[LossRow]:
    with open(path, newline="", encoding="utf-8") as f:
        return [LossRow(int(r["epoch"]), int(r["step"]), float(r["loss"]), float(r["lr"]))
                for r in csv.DictReader(f)]
