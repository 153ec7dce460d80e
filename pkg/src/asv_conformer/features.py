"""Log-mel filterbank front end, chunking and the synthetic speaker corpus."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
FRAME_LEN_MS = 25
FRAME_SHIFT_MS = 10
N_FFT = 512
N_MELS = 80
LOG_FLOOR = 1e-10


class FeatureError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise FeatureError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise FeatureError("waveform samples must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise FeatureError("waveform contains non-finite samples")

    @property
    def seconds(self) -> float:
        return len(self.samples) / self.sample_rate


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filters(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                fmin: float = 20.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape ``(n_mels, n_fft // 2 + 1)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def num_frames(n_samples: int, sample_rate: int = SAMPLE_RATE) -> int:
    frame_len = sample_rate * FRAME_LEN_MS // 1000
    shift = sample_rate * FRAME_SHIFT_MS // 1000
    return (n_samples - frame_len) // shift + 1


def mel_filterbank(w: Waveform, n_mels: int = N_MELS) -> np.ndarray:
    """Log mel filterbank energies, ``(T, n_mels)`` float32.

    25 ms Hamming frames every 10 ms, 512-point power spectrum, energies
    floored at ``LOG_FLOOR`` before the log.
    """
    sr = w.sample_rate
    frame_len = sr * FRAME_LEN_MS // 1000
    shift = sr * FRAME_SHIFT_MS // 1000
    if len(w.samples) < frame_len:
        raise FeatureError(
            f"utterance shorter than one frame ({len(w.samples)} < {frame_len} samples)")
    n_fft = max(N_FFT, 1 << (frame_len - 1).bit_length())
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, frame_len)[::shift]
    spec = np.abs(np.fft.rfft(frames * np.hamming(frame_len), n=n_fft)) ** 2
    energies = spec @ mel_filters(n_mels, n_fft, sr).T
    return np.log(np.maximum(energies, LOG_FLOOR)).astype(np.float32)


def cmn(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f)
    if f.ndim != 2 or f.shape[0] < 1:
        raise FeatureError("cmn expects a (T, dim) matrix with T >= 1")
    return (f - f.mean(axis=0, dtype=np.float64)).astype(f.dtype)


def chunk(f: np.ndarray, chunk_len: int = 300, rng: np.random.Generator | None = None,
          start: int | None = None) -> np.ndarray:
    """Cut a ``chunk_len``-frame window.

    Longer inputs give a random contiguous window (or the one at ``start``);
    shorter ones are tiled from the beginning so ``out[i] == f[i % T]``.
    """
    if chunk_len < 1:
        raise FeatureError("chunk_len must be >= 1")
    T = f.shape[0]
    if T < chunk_len:
        return f[np.arange(chunk_len) % T]
    if start is None:
        start = 0 if rng is None else int(rng.integers(0, T - chunk_len + 1))
    return f[start:start + chunk_len]


# ---------------------------------------------------------------------------
# Synthetic corpus

_N_PHONES = 16
_PHONE_SEED = 20220310


def _phone_inventory() -> np.ndarray:
    # Formant centres (Hz) of the shared phone set; identical for every corpus.
    rng = np.random.default_rng(_PHONE_SEED)
    f1 = rng.uniform(250, 850, _N_PHONES)
    f2 = rng.uniform(850, 2300, _N_PHONES)
    f3 = rng.uniform(2300, 3400, _N_PHONES)
    return np.stack([f1, f2, f3], axis=1)


PHONE_FORMANTS = _phone_inventory()
_FORMANT_BW = np.array([90.0, 140.0, 220.0])
_TEMPLATE_BANDS = np.linspace(0.0, SAMPLE_RATE / 2, 12)


@dataclass(frozen=True)
class SpeakerProfile:
    """One synthetic talker.

    ``template`` holds log-gains over fixed frequency bands, ``jitter`` the
    relative size of pitch wobble and per-utterance variation. The
    remaining fields shape the voice itself: per-formant log-gains, a
    bandwidth factor and the harmonic roll-off exponent.
    """

    f0: float
    formant_scale: float
    template: tuple
    jitter: float
    formant_gains: tuple = (0.0, 0.0, 0.0)
    bandwidth: float = 1.0
    tilt: float = 0.5

    def gain(self, hz: np.ndarray) -> np.ndarray:
        return np.exp(np.interp(hz, _TEMPLATE_BANDS, np.asarray(self.template)))


@dataclass
class SynthCorpus:
    speakers: list[SpeakerProfile]
    utterances: list[tuple[int, Waveform]]
    seed: int
    # Per-sample phone ids, parallel to ``utterances``; used for pseudo-ASR labels.
    alignments: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        for spk, _ in self.utterances:
            if not 0 <= spk < len(self.speakers):
                raise FeatureError(f"utterance references unknown speaker {spk}")


def speaker_profile(seed: int, speaker: int) -> SpeakerProfile:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0, speaker]))
    return SpeakerProfile(
        f0=float(np.exp(rng.uniform(np.log(90.0), np.log(260.0)))),
        formant_scale=float(rng.uniform(0.78, 1.28)),
        template=tuple(float(g) for g in rng.normal(0.0, 0.8, len(_TEMPLATE_BANDS))),
        jitter=float(rng.uniform(0.01, 0.03)),
        formant_gains=tuple(float(g) for g in rng.normal(0.0, 0.6, 3)),
        bandwidth=float(np.exp(rng.uniform(np.log(0.6), np.log(1.6)))),
        tilt=float(rng.uniform(0.2, 1.0)),
    )


def _smooth(x: np.ndarray, width: int) -> np.ndarray:
    # Moving average along the last axis via cumulative sums.
    pad = width // 2
    xp = np.concatenate([np.repeat(x[..., :1], pad, -1), x, np.repeat(x[..., -1:], width - pad, -1)], -1)
    c = np.cumsum(xp, axis=-1)
    return (c[..., width:] - c[..., :-width])[..., : x.shape[-1]] / width


def synth_utterance(profile: SpeakerProfile, seconds: float, seed: int, speaker: int,
                    index: int) -> tuple[Waveform, np.ndarray]:
    """Render one utterance and its per-sample phone alignment (-1 marks pauses)."""
    sr = SAMPLE_RATE
    n = int(round(seconds * sr))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1, speaker, index]))

    # phone segmentation with occasional pauses
    bounds, ids = [0], []
    while bounds[-1] < n:
        bounds.append(bounds[-1] + int(rng.uniform(0.05, 0.15) * sr))
        ids.append(-1 if rng.random() < 0.12 else int(rng.integers(_N_PHONES)))
    seg = np.repeat(np.arange(len(ids)), np.diff(bounds))[:n]
    align = np.asarray(ids)[seg]

    # per-utterance speaker variation
    f0_utt = profile.f0 * (1.0 + profile.jitter * rng.normal())
    scale_utt = profile.formant_scale * (1.0 + 0.25 * profile.jitter * rng.normal())
    seg_f0 = f0_utt * (1.0 + profile.jitter * rng.normal(size=len(ids)))
    f0 = _smooth(seg_f0[seg], 400)
    phase = 2 * np.pi * np.cumsum(f0) / sr

    n_harm = int(7600 // (f0.max() * 1.05))
    k = np.arange(1, n_harm + 1)
    harm_hz = k[None, :] * np.maximum(seg_f0, 1.0)[:, None]                 # (segments, K)
    formants = PHONE_FORMANTS[np.maximum(ids, 0)] * scale_utt                 # (segments, 3)
    bw = _FORMANT_BW * profile.bandwidth
    resonance = np.sum(np.exp(np.asarray(profile.formant_gains))
                       / (1.0 + ((harm_hz[:, :, None] - formants[:, None, :]) / bw) ** 2), axis=-1)
    amps = resonance * profile.gain(harm_hz) * k ** -profile.tilt
    amps[np.asarray(ids) < 0] = 0.0
    # linear crossfade between segment centres
    centres = (np.asarray(bounds[:-1]) + np.asarray(bounds[1:])) / 2
    pos = np.interp(np.arange(n), centres, np.arange(len(ids)))
    left = np.floor(pos).astype(int)
    right = np.minimum(left + 1, len(ids) - 1)
    frac = (pos - left).astype(np.float32)
    env = amps[left].T.astype(np.float32) * (1 - frac) + amps[right].T.astype(np.float32) * frac
    offsets = rng.uniform(0, 2 * np.pi, (n_harm, 1))
    carriers = np.sin((k[:, None] * phase[None, :] + offsets).astype(np.float32))
    voiced = np.einsum("kn,kn->n", env, carriers).astype(np.float64)

    voiced /= np.sqrt(np.mean(voiced ** 2)) + 1e-12
    snr_db = rng.uniform(20.0, 35.0)
    noise = rng.normal(size=n) * 10 ** (-snr_db / 20)
    samples = 0.1 * (voiced + noise) * np.exp(rng.normal(0.0, 0.3))
    return Waveform(samples, sr), align


def synth_corpus(n_speakers: int, utts_per_speaker: int, utt_seconds: float, seed: int,
                 speaker_offset: int = 0) -> SynthCorpus:
    """Deterministic corpus where each talker has its own pitch, vocal-tract
    scale and spectral tilt template.

    ``speaker_offset`` selects a disjoint block of talkers from the same seed,
    which is how held-out speakers are drawn.
    """
    if n_speakers < 2:
        raise FeatureError("need at least two speakers for nontarget trials")
    speakers = [speaker_profile(seed, speaker_offset + i) for i in range(n_speakers)]
    utterances, alignments = [], []
    for i, prof in enumerate(speakers):
        for j in range(utts_per_speaker):
            w, a = synth_utterance(prof, utt_seconds, seed, speaker_offset + i, j)
            utterances.append((i, w))
            alignments.append(a)
    return SynthCorpus(speakers, utterances, seed, alignments)


def frame_labels(align: np.ndarray, n_frames: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Phone id at the centre sample of each analysis frame."""
    frame_len = sample_rate * FRAME_LEN_MS // 1000
    shift = sample_rate * FRAME_SHIFT_MS // 1000
    centres = np.arange(n_frames) * shift + frame_len // 2
    return align[np.minimum(centres, len(align) - 1)]


# ---------------------------------------------------------------------------
# Files

def parse_synth_spec(spec: str) -> dict:
    """``synth:seed=7,speaker=3,utt=4,seconds=2.0`` -> dict."""
    if not spec.startswith("synth:"):
        raise FeatureError(f"not a synth spec: {spec!r}")
    fields = dict(kv.split("=", 1) for kv in spec[len("synth:"):].split(","))
    try:
        return {"seed": int(fields["seed"]), "speaker": int(fields["speaker"]),
                "utt": int(fields["utt"]), "seconds": float(fields["seconds"])}
    except (KeyError, ValueError) as e:
        raise FeatureError(f"malformed synth spec {spec!r}") from e


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise FeatureError(f"{path}: only 16-bit PCM WAV is supported")
        raw = f.readframes(f.getnframes())
        data = np.frombuffer(raw, dtype="<i2").reshape(-1, f.getnchannels())[:, 0]
        return Waveform(data.astype(np.float64) / 32768.0, f.getframerate())


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def load_audio(source: str, base_dir: Path | None = None) -> Waveform:
    if source.startswith("synth:"):
        s = parse_synth_spec(source)
        prof = speaker_profile(s["seed"], s["speaker"])
        return synth_utterance(prof, s["seconds"], s["seed"], s["speaker"], s["utt"])[0]
    path = Path(source)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    if not path.exists():
        raise FileNotFoundError(f"audio file not found: {path}")
    return read_wav(path)


def read_manifest(path) -> list[tuple[str, str, str]]:
    """Rows of ``(utt_id, speaker_id, source)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FeatureError(f"{path}:{lineno}: expected '<utt_id> <speaker_id> <source>'")
        rows.append((parts[0], parts[1], parts[2]))
    return rows


def write_manifest(path, rows) -> None:
    Path(path).write_text("".join(f"{u} {s} {src}\n" for u, s, src in rows), encoding="utf-8")


def write_feature_cache(path, f: np.ndarray) -> None:
    f = np.ascontiguousarray(f, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *f.shape))
        fh.write(f.tobytes())


def read_feature_cache(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FeatureError(f"{path}: feature cache header truncated")
    T, dim = struct.unpack_from("<II", data)
    if len(data) != 8 + 4 * T * dim:
        raise FeatureError(f"{path}: feature cache payload is {len(data) - 8} bytes, "
                           f"expected {4 * T * dim}")
    return np.frombuffer(data, dtype="<f4", offset=8).reshape(T, dim).astype(np.float32)
