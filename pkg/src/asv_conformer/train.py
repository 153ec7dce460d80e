"""Training loops for the speaker model and the pseudo-ASR source encoder."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conformer import ConformerEncoder, EncoderConfig, subsampled_length
from .features import SynthCorpus, chunk, cmn, frame_labels, mel_filterbank, synth_corpus
from .model import HeadConfig, SpeakerModel
from .sam import AdamW, BaseOptConfig, SamConfig, lr_at, sam_step
from .scoring import DetMetrics, TrialSet, all_pair_trials, cosine_score, evaluate, extract_embedding
from .transfer import ParamStore

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    chunk_len: int = 300
    sam: SamConfig = field(default_factory=SamConfig)
    base: BaseOptConfig = field(default_factory=BaseOptConfig)


@dataclass
class LossRow:
    epoch: int
    step: int
    loss: float
    lr: float


def corpus_features(corpus: SynthCorpus) -> list[np.ndarray]:
    return [cmn(mel_filterbank(w)) for _, w in corpus.utterances]


def seed_streams(seed: int, n: int = 4) -> list[int]:
    """Independent integer seeds: corpus, init, chunk sampling, dropout."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_speaker_model(model: SpeakerModel, feats: list[np.ndarray], labels: list[int],
                        cfg: TrainConfig, chunk_seed: int, dropout_seed: int,
                        on_epoch: Callable[[int, SpeakerModel], bool | None] | None = None) -> list[LossRow]:
    """Train with SAM over AdamW on random fixed-length chunks.

    ``on_epoch(epoch, model)`` runs after every epoch; returning True stops early.
    """
    rng = np.random.default_rng(chunk_seed)
    torch.manual_seed(dropout_seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = AdamW(params, cfg.base)
    label_arr = np.asarray(labels)
    rows, step = [], 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        for idx in _batches(len(feats), cfg.batch_size, rng):
            step += 1
            x = torch.from_numpy(np.stack([chunk(feats[i], cfg.chunk_len, rng) for i in idx]))
            y = torch.from_numpy(label_arr[idx]).long()
            lr = lr_at(step, cfg.base)
            res = sam_step(lambda: model.compute_loss(x, y), params, cfg.sam, opt, lr)
            loss = float(res.loss)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}")
            if not all(bool(torch.isfinite(p).all()) for p in params):
                raise NumericError(f"non-finite parameters after the update at epoch {epoch} step {step}")
            rows.append(LossRow(epoch, step, loss, lr))
        mean = np.mean([r.loss for r in rows if r.epoch == epoch])
        log.info("epoch %d mean loss %.4f lr %.2e", epoch, mean, rows[-1].lr)
        if on_epoch is not None and on_epoch(epoch, model):
            break
    model.eval()
    return rows


def embed_all(model, feats: list[np.ndarray], chunk_len: int = 300) -> list[np.ndarray]:
    return [extract_embedding(model, f, chunk_len) for f in feats]


def heldout_metrics(model, feats: list[np.ndarray], speakers: list[int], chunk_len: int = 300) -> DetMetrics:
    """EER/minDCF over all utterance pairs of a held-out set."""
    emb = embed_all(model, feats, chunk_len)
    ids = [str(i) for i in range(len(feats))]
    trials = all_pair_trials(ids, speakers)
    scores = [cosine_score(emb[int(e)], emb[int(t)]) for e, t, _ in trials]
    return evaluate(TrialSet(trials, scores))


# ---------------------------------------------------------------------------
# Pseudo-ASR pretraining

N_PHONE_CLASSES = 17   # 16 phones + pause
PRETRAIN_SPEAKER_OFFSET = 2000


class FrameClassifier(nn.Module):
    """Conformer encoder with a per-frame phone classifier on top."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.encoder = ConformerEncoder(cfg)
        self.asr_head = nn.Linear(cfg.d_model, N_PHONE_CLASSES)

    def forward(self, feats):
        return self.asr_head(self.encoder(feats))


def _subsampled_targets(labels: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    # label of the input frame at the centre of each output frame's receptive field
    n_out = subsampled_length(len(labels), cfg.subsample)
    span = len(labels) / n_out
    centres = np.minimum((np.arange(n_out) * span + span / 2).astype(int), len(labels) - 1)
    return labels[centres]


@dataclass(frozen=True)
class PretrainConfig:
    n_speakers: int = 40
    utts_per_speaker: int = 5
    utt_seconds: float = 4.0
    epochs: int = 8
    batch_size: int = 16
    chunk_len: int = 300
    base: BaseOptConfig = field(default_factory=lambda: BaseOptConfig(
        peak_lr=2e-3, weight_decay=0.01, warmup_steps=20))


def make_pseudo_asr_checkpoint(cfg: EncoderConfig, task_seed: int,
                               pcfg: PretrainConfig = PretrainConfig()) -> ParamStore:
    """Train ``cfg``'s encoder to predict synthetic phone labels per frame.

    The corpus comes from the same generator family as the speaker data but
    from a separate block of talkers, so the speakers are disjoint from any
    training or held-out set. The returned store holds
    ``encoder.*`` plus the ``asr_head.*`` output layer.
    """
    corpus_seed, init_seed, chunk_seed, dropout_seed = seed_streams(task_seed)
    corpus = synth_corpus(pcfg.n_speakers, pcfg.utts_per_speaker, pcfg.utt_seconds, corpus_seed,
                          speaker_offset=PRETRAIN_SPEAKER_OFFSET)
    feats = corpus_features(corpus)
    labels = [np.where(frame_labels(a, len(f)) < 0, N_PHONE_CLASSES - 1, frame_labels(a, len(f)))
              for a, f in zip(corpus.alignments, feats)]

    torch.manual_seed(init_seed)
    model = FrameClassifier(cfg)
    torch.manual_seed(dropout_seed)
    rng = np.random.default_rng(chunk_seed)
    params = list(model.parameters())
    opt = AdamW(params, pcfg.base)
    step = 0
    for epoch in range(1, pcfg.epochs + 1):
        model.train()
        losses = []
        for idx in _batches(len(feats), pcfg.batch_size, rng):
            step += 1
            xs, ys = [], []
            for i in idx:
                start = int(rng.integers(0, max(len(feats[i]) - pcfg.chunk_len, 0) + 1))
                xs.append(chunk(feats[i], pcfg.chunk_len, start=start))
                ys.append(_subsampled_targets(chunk(labels[i], pcfg.chunk_len, start=start), cfg))
            x = torch.from_numpy(np.stack(xs))
            y = torch.from_numpy(np.stack(ys)).long()

            def loss_fn():
                return F.cross_entropy(model(x).flatten(0, 1), y.flatten())

            res = sam_step(loss_fn, params, SamConfig(enabled=False), opt, lr_at(step, pcfg.base))
            losses.append(float(res.loss))
        log.info("asr pretrain epoch %d frame CE %.4f", epoch, np.mean(losses))
    meta = {"task": "pseudo_asr", "task_seed": task_seed, "encoder": cfg.to_dict()}
    return ParamStore.from_module(model, meta)


def build_model(enc: EncoderConfig, head: HeadConfig, init_seed: int) -> SpeakerModel:
    torch.manual_seed(init_seed)
    return SpeakerModel(enc, head)
