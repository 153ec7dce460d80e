"""Embedding extraction, cosine scoring and detection metrics (EER, minDCF)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .features import chunk


class TrialError(ValueError):
    pass


@dataclass
class TrialSet:
    trials: list[tuple[str, str, bool]]
    scores: list[float] | None = None

    @classmethod
    def from_arrays(cls, scores, labels) -> "TrialSet":
        scores, labels = np.asarray(scores, float), np.asarray(labels, bool)
        trials = [(f"e{i}", f"t{i}", bool(t)) for i, t in enumerate(labels)]
        return cls(trials, scores.tolist())

    @property
    def labels(self) -> np.ndarray:
        return np.array([t for _, _, t in self.trials], dtype=bool)

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        """Target and nontarget score arrays."""
        if self.scores is None:
            raise TrialError("trial set has no scores")
        if len(self.scores) != len(self.trials):
            raise TrialError(f"{len(self.scores)} scores for {len(self.trials)} trials")
        s, lab = np.asarray(self.scores, dtype=np.float64), self.labels
        if not lab.any() or lab.all():
            raise TrialError("need at least one target and one nontarget trial")
        return s[lab], s[~lab]


@dataclass
class DetMetrics:
    eer: float
    min_dcf: float
    threshold_eer: float
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"eer": self.eer, "min_dcf_0.01": self.min_dcf,
                           "threshold": self.threshold_eer, **self.extra}, sort_keys=True, indent=2) + "\n"


@torch.no_grad()
def extract_embedding(model, feats: np.ndarray, chunk_len: int = 300) -> np.ndarray:
    """Mean x-vector over consecutive ``chunk_len`` chunks.

    The trailing remainder (or a short utterance) is wrap-tiled to full length.
    """
    T = feats.shape[0]
    starts = list(range(0, max(T - chunk_len, 0) + 1, chunk_len)) if T >= chunk_len else []
    pieces = [feats[s:s + chunk_len] for s in starts]
    tail = starts[-1] + chunk_len if starts else 0
    if tail < T:
        pieces.append(chunk(feats[tail:], chunk_len))
    was_training = model.training
    model.eval()
    try:
        x = torch.from_numpy(np.stack(pieces).astype(np.float32))
        emb = model(x.to(next(model.parameters()).dtype))
    finally:
        model.train(was_training)
    return emb.mean(dim=0).double().numpy()


def cosine_score(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine score of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _operating_points(tar: np.ndarray, non: np.ndarray):
    """FAR/FRR when accepting ``score >= t`` for t = -inf, each distinct score, +inf."""
    scores = np.concatenate([tar, non])
    is_tar = np.concatenate([np.ones(len(tar)), np.zeros(len(non))])
    order = np.argsort(scores, kind="mergesort")
    scores, is_tar = scores[order], is_tar[order]
    # rejected counts below each distinct score
    uniq, first = np.unique(scores, return_index=True)
    tar_below = np.concatenate([[0.0], np.cumsum(is_tar)])[first]
    non_below = np.concatenate([[0.0], np.cumsum(1 - is_tar)])[first]
    frr = np.concatenate([[0.0], tar_below / len(tar), [1.0]])
    far = np.concatenate([[1.0], 1 - non_below / len(non), [0.0]])
    thr = np.concatenate([[-np.inf], uniq, [np.inf]])
    return far, frr, thr


def compute_eer(t: TrialSet) -> tuple[float, float]:
    """Equal error rate and its threshold.

    The FAR/FRR crossing is linearly interpolated between the two bracketing
    operating points when no point has FAR == FRR exactly.
    """
    tar, non = t.split()
    far, frr, thr = _operating_points(tar, non)
    diff = far - frr                      # decreasing from +1 to -1
    i = int(np.argmax(diff <= 0))
    if diff[i] == 0:
        return float(far[i]), float(thr[i])
    lam = diff[i - 1] / (diff[i - 1] - diff[i])
    eer = far[i - 1] + lam * (far[i] - far[i - 1])
    lo, hi = thr[i - 1], thr[i]
    threshold = hi if not np.isfinite(lo) else lo if not np.isfinite(hi) else lo + lam * (hi - lo)
    return float(eer), float(threshold)


def compute_min_dcf(t: TrialSet, p_target: float = 0.01, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    tar, non = t.split()
    far, frr, _ = _operating_points(tar, non)
    dcf = c_miss * p_target * frr + c_fa * (1 - p_target) * far
    return float(dcf.min() / min(c_miss * p_target, c_fa * (1 - p_target)))


def evaluate(t: TrialSet, p_target: float = 0.01) -> DetMetrics:
    eer, thr = compute_eer(t)
    return DetMetrics(eer, compute_min_dcf(t, p_target), thr)


def det_points(t: TrialSet) -> tuple[np.ndarray, np.ndarray]:
    far, frr, _ = _operating_points(*t.split())
    return far, frr


# ---------------------------------------------------------------------------
# Files

def read_trials(path) -> list[tuple[str, str, bool]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trial file not found: {path}")
    trials = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
            raise TrialError(f"{path}:{lineno}: expected '<enroll> <test> <target|nontarget>'")
        trials.append((parts[0], parts[1], parts[2] == "target"))
    return trials


def write_trials(path, trials) -> None:
    Path(path).write_text(
        "".join(f"{e} {t} {'target' if tgt else 'nontarget'}\n" for e, t, tgt in trials), encoding="utf-8")


def all_pair_trials(utt_ids, speakers) -> list[tuple[str, str, bool]]:
    out = []
    for i in range(len(utt_ids)):
        for j in range(i + 1, len(utt_ids)):
            out.append((utt_ids[i], utt_ids[j], speakers[i] == speakers[j]))
    return out


def score_trials(trials, embeddings: dict[str, np.ndarray]) -> list[float]:
    missing = sorted({u for e, t, _ in trials for u in (e, t)} - set(embeddings))
    if missing:
        raise TrialError(f"trial utterance {missing[0]} has no embedding")
    return [cosine_score(embeddings[e], embeddings[t]) for e, t, _ in trials]


def write_scores(path, trials, scores) -> None:
    Path(path).write_text("".join(f"{e} {t} {s:.8f}\n" for (e, t, _), s in zip(trials, scores)),
                          encoding="utf-8")
