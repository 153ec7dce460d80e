"""Single-thread real-time-factor measurement."""

from __future__ import annotations

import hashlib
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .features import cmn, mel_filterbank, speaker_profile, synth_utterance


@dataclass
class RtfReport:
    model_config: dict
    audio_seconds: float
    wall_seconds: float
    rtf: float
    warmup_runs: int
    timed_runs: int
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def param_checksum(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def benchmark_features(duration_seconds: float, seed: int = 0) -> np.ndarray:
    wav, _ = synth_utterance(speaker_profile(seed, 0), duration_seconds, seed, 0, 0)
    return cmn(mel_filterbank(wav))


def measure_rtf(model, duration_seconds: float, warmup: int = 3, runs: int = 10,
                feats: np.ndarray | None = None, min_timed: float = 1e-3) -> RtfReport:
    """Median single-thread forward time over ``duration_seconds`` of audio, divided by the duration.

    Feature extraction happens once, outside the timed region. When one
    forward pass is too short for the timer, each timed sample repeats the
    forward pass until ``min_timed`` seconds have elapsed.
    """
    if duration_seconds < 1:
        raise ValueError("benchmark audio must be at least one second long")
    if feats is None:
        feats = benchmark_features(duration_seconds)
    x = torch.from_numpy(feats)[None]
    notes = []
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    before = param_checksum(model)
    was_training = model.training
    model.eval()
    try:
        with torch.inference_mode():
            for _ in range(warmup):
                model(x)
            reps = 1
            t0 = time.perf_counter()
            model(x)
            if time.perf_counter() - t0 < min_timed:
                reps = max(1, int(min_timed / max(time.perf_counter() - t0, 1e-9)) + 1)
                notes.append(f"timer resolution: each sample averages {reps} forward passes")
            samples = []
            for _ in range(runs):
                t0 = time.perf_counter()
                for _ in range(reps):
                    model(x)
                samples.append((time.perf_counter() - t0) / reps)
    finally:
        model.train(was_training)
        torch.set_num_threads(threads)
    if param_checksum(model) != before:
        raise RuntimeError("benchmark modified model parameters")
    wall = statistics.median(samples)
    cfg = model.config_dict() if hasattr(model, "config_dict") else {}
    return RtfReport(cfg, float(duration_seconds), wall, wall / duration_seconds, warmup, runs, notes)


def bench_suite(models: dict, duration_seconds: float, warmup: int = 3, runs: int = 10):
    """Run :func:`measure_rtf` for each named model on the same audio.

    Returns ``(reports, summary)``; ``summary`` lists names from fastest to slowest.
    """
    if not models:
        return [], {"order": []}
    feats = benchmark_features(duration_seconds)
    reports = {name: measure_rtf(m, duration_seconds, warmup, runs, feats=feats)
               for name, m in models.items()}
    order = sorted(reports, key=lambda n: reports[n].rtf)
    return list(reports.values()), {"order": order,
                                    "rtf": {n: reports[n].rtf for n in reports}}
