"""``asv-conformer`` command line.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .bench import bench_suite, measure_rtf
from .config import ConfigError, RunConfig, load_config
from .features import FeatureError, load_audio, read_manifest, write_manifest, write_wav
from .model import REFERENCE_CONFIGS, HeadConfig, SpeakerModel
from .scoring import (TrialError, TrialSet, all_pair_trials, det_points, evaluate, extract_embedding,
                      read_trials, score_trials, write_scores, write_trials)
from .train import NumericError, PretrainConfig, make_pseudo_asr_checkpoint, seed_streams
from .transfer import CheckpointError, TransferError, load_checkpoint, save_checkpoint, transfer_encoder

log = logging.getLogger("asv_conformer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Embedding files: one line per utterance, "<utt_id> v1 v2 ..."

def write_embeddings(path, embeddings: dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt, v in embeddings.items():
            f.write(utt + " " + " ".join(repr(float(x)) for x in v) + "\n")


def read_embeddings(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"embedding file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        utt, *vals = line.split()
        try:
            out[utt] = np.array([float(v) for v in vals])
        except ValueError as e:
            raise TrialError(f"{path}:{lineno}: malformed embedding") from e
    return out


def _embed_manifest(model: SpeakerModel, manifest, chunk_len: int) -> dict[str, np.ndarray]:
    rows = read_manifest(manifest)
    base = Path(manifest).parent
    data = pipeline.load_rows(rows, base)
    return {u: extract_embedding(model, f, chunk_len) for u, f in zip(data.utt_ids, data.feats)}


# ---------------------------------------------------------------------------
# Commands

def cmd_synth(a) -> None:
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # same corpus stream as a training run with this seed
    rows = pipeline.synth_rows(a.speakers, a.utts, a.seconds, seed_streams(a.seed)[0], a.speaker_offset)
    if a.wav:
        wav_dir = out / "wav"
        wav_dir.mkdir(exist_ok=True)
        written = []
        for utt, spk, src in rows:
            write_wav(wav_dir / f"{utt}.wav", load_audio(src))
            written.append((utt, spk, f"wav/{utt}.wav"))
        rows = written
    write_manifest(out / "manifest.txt", rows)
    write_trials(out / "trials.txt", all_pair_trials([u for u, _, _ in rows], [s for _, s, _ in rows]))
    log.info("wrote %d utterances to %s", len(rows), out)


def cmd_train(a) -> None:
    cfg = load_config(a.config)
    cfg.check_paths()
    heldout, metrics_rows = None, []
    if a.heldout_log:
        heldout = pipeline.load_rows(pipeline.eval_rows(cfg), cfg.base_dir)

    def on_metrics(epoch, met):
        metrics_rows.append((epoch, met.eer, met.min_dcf))

    model, rows, names = pipeline.run_training(cfg, heldout=heldout, on_metrics=on_metrics)
    save_checkpoint(pipeline.model_store(model, cfg, names), a.out)
    loss_log = a.loss_log or str(Path(a.out).with_suffix(".loss.csv"))
    pipeline.write_loss_log(loss_log, rows)
    if a.heldout_log:
        with open(a.heldout_log, "w", encoding="utf-8") as f:
            f.write("epoch,eer,min_dcf\n")
            f.writelines(f"{e},{eer!r},{dcf!r}\n" for e, eer, dcf in metrics_rows)
    if a.plot and rows:
        from .plotting import plot_loss
        plot_loss(rows, a.plot)
    log.info("saved %s (%d steps)", a.out, len(rows))


def cmd_pretrain_asr(a) -> None:
    cfg = load_config(a.config)
    pcfg = PretrainConfig() if a.epochs is None else PretrainConfig(epochs=a.epochs)
    store = make_pseudo_asr_checkpoint(cfg.encoder(), cfg["seed"], pcfg)
    save_checkpoint(store, a.out)
    log.info("saved pseudo-ASR encoder to %s", a.out)


def cmd_extract(a) -> None:
    model = pipeline.model_from_store(load_checkpoint(a.ckpt))
    write_embeddings(a.out, _embed_manifest(model, a.manifest, a.chunk_len))


def cmd_score(a) -> None:
    trials = read_trials(a.trials)
    scores = score_trials(trials, read_embeddings(a.embeddings))
    write_scores(a.out, trials, scores)


def cmd_eval(a) -> None:
    trials = read_trials(a.trials)
    rows = read_manifest(a.manifest)
    known = {u for u, _, _ in rows}
    for e, t, _ in trials:
        for u in (e, t):
            if u not in known:
                raise TrialError(f"trial utterance {u} is not in manifest {a.manifest}")
    model = pipeline.model_from_store(load_checkpoint(a.ckpt))
    emb = _embed_manifest(model, a.manifest, a.chunk_len)
    ts = TrialSet(trials, score_trials(trials, emb))
    met = evaluate(ts)
    Path(a.out).write_text(met.to_json(), encoding="utf-8")
    if a.scores:
        write_scores(a.scores, trials, ts.scores)
    if a.plot:
        from .plotting import plot_det
        far, frr = det_points(ts)
        plot_det(far, frr, a.plot, eer=met.eer)
    log.info("eer %.4f min_dcf %.4f", met.eer, met.min_dcf)


def cmd_transfer(a) -> None:
    src, dst = load_checkpoint(a.src), load_checkpoint(a.dst)
    model = pipeline.model_from_store(dst)
    transfer_encoder(src, model, a.k)
    store = type(dst).from_module(model, dst.metadata)
    if a.k > 0:
        store.metadata["transferred_blocks"] = a.k
    save_checkpoint(store, a.out)


def _rtf_model(enc, n_classes: int) -> SpeakerModel:
    model = SpeakerModel(enc, HeadConfig(n_classes))
    model.eval()
    return model


def cmd_bench_rtf(a) -> None:
    import torch
    torch.manual_seed(0)
    if a.reference_configs:
        models = {name: _rtf_model(enc, 2) for name, enc in REFERENCE_CONFIGS.items()}
        reports, summary = bench_suite(models, a.seconds, a.warmup, a.runs)
        payload = {"reports": [r.to_dict() for r in reports], **summary}
        rtf = summary["rtf"]
    else:
        cfg = load_config(a.config) if a.config else RunConfig.from_dict({})
        model = _rtf_model(cfg.encoder(), 2)
        report = measure_rtf(model, a.seconds, a.warmup, a.runs)
        payload = report.to_dict()
        rtf = {cfg.encoder().name: report.rtf}
    Path(a.json).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if a.plot:
        from .plotting import plot_rtf
        plot_rtf(rtf, a.plot)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="asv-conformer", description="Conformer speaker verification toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic corpus manifest and all-pair trials")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--speakers", type=int, default=20)
    s.add_argument("--utts", type=int, default=10)
    s.add_argument("--seconds", type=float, default=4.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--speaker-offset", type=int, default=0)
    s.add_argument("--wav", action="store_true", help="render 16-bit WAV files instead of synth specs")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a speaker model")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--loss-log", help="CSV epoch,step,loss,lr (default: <out>.loss.csv)")
    s.add_argument("--heldout-log", help="CSV epoch,eer,min_dcf on the held-out set after every epoch")
    s.add_argument("--plot", help="loss curve image")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("pretrain-asr", help="train an encoder on synthetic phone labels")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_pretrain_asr)

    s = sub.add_parser("extract", help="x-vectors for every manifest utterance")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--chunk-len", type=int, default=300)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("score", help="cosine-score trials from an embedding file")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--trials", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("eval", help="EER and minDCF of a checkpoint on a trial list")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--trials", required=True)
    s.add_argument("--out", required=True, help="metrics JSON")
    s.add_argument("--scores", help="also write per-trial scores")
    s.add_argument("--plot", help="DET curve image")
    s.add_argument("--chunk-len", type=int, default=300)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("transfer", help="copy frontend and the first K encoder blocks between checkpoints")
    s.add_argument("--src", required=True)
    s.add_argument("--dst", required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("bench-rtf", help="single-thread real-time factor")
    s.add_argument("--config")
    s.add_argument("--seconds", type=float, default=10.0)
    s.add_argument("--json", required=True)
    s.add_argument("--reference-configs", action="store_true", help="benchmark the four reference configurations")
    s.add_argument("--warmup", type=int, default=3)
    s.add_argument("--runs", type=int, default=10)
    s.add_argument("--plot", help="RTF bar chart image")
    s.set_defaults(func=cmd_bench_rtf)
    return p


_DATA_ERRORS = (FileNotFoundError, FeatureError, TrialError, CheckpointError, TransferError, ConfigError,
                ValueError, OSError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        args.func(args)
    except (NumericError, FloatingPointError) as e:
        print(f"asv-conformer: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as e:
        print(f"asv-conformer: error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
