"""Acceptance suite: one printed PASS/FAIL line per criterion.

Tolerances are fixed here and must not be relaxed to make a run pass.
"""

from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest
import torch

from asv_conformer import pipeline
from asv_conformer.attention import MultiHeadSelfAttention, length_scaled_attention, rotary_embed, scaled_dot_attention
from asv_conformer.bench import bench_suite
from asv_conformer.cli import main
from asv_conformer.conformer import ConformerBlock, ConvModule, EncoderConfig, FeedForwardHalf
from asv_conformer.config import DESK_SCALE, RunConfig
from asv_conformer.model import REFERENCE_CONFIGS, REFERENCE_PARAMS, VOXCELEB2_SPEAKERS, HeadConfig, SpeakerModel, param_count
from asv_conformer.pooling import aam_softmax_loss, attentive_stats_pool, project_xvector
from asv_conformer.sam import AdamW, BaseOptConfig, SamConfig, SGD, lr_at, sam_step
from asv_conformer.scoring import TrialSet, compute_eer, compute_min_dcf
from asv_conformer.train import make_pseudo_asr_checkpoint
from asv_conformer.transfer import ParamStore, save_checkpoint, transfer_encoder
from oracles import brute_eer, brute_min_dcf, gradcheck, projected, rel_err

GRAD_TOL = 1e-4
GRAD_BUDGET_S = 120.0
E2E_EER_BAR = 0.10
E2E_BUDGET_S = 15 * 60
TRANSFER_RATIO = 0.7
RTF_RATIO = (1.8, 4.0)
BENCH_SEED = 0


def test_parameter_counts(acceptance):
    parts, ok = [], True
    for name, tol in (("6L-256D-4H", 0.10), ("12L-256D-4H", 0.10), ("6L-512D-8H", 0.10),
                      ("6L-256D-4H-2Sub", 0.20)):
        n = param_count(REFERENCE_CONFIGS[name], HeadConfig(VOXCELEB2_SPEAKERS))
        dev = n / REFERENCE_PARAMS[name] - 1
        ok &= abs(dev) <= tol
        parts.append(f"{name} {n / 1e6:.2f}M ({dev:+.1%}, tol {tol:.0%})")
    acceptance("parameter counts", ok, "; ".join(parts))


def _grad_cases():
    """Yield (name, relative error) for every differentiable operation."""
    torch.manual_seed(0)
    for use_lsa in (True, False):
        attn = MultiHeadSelfAttention(8, 2, use_lsa=use_lsa, init_len=6)
        x = torch.randn(5, 8, requires_grad=True)
        errs = gradcheck(projected(lambda: attn(x), torch.empty(5, 8)), {"x": x, **dict(attn.named_parameters())})
        yield f"mhsa(lsa={use_lsa})", max(errs.values())

    # derivative with respect to the length scale itself, not its logarithm
    attn = MultiHeadSelfAttention(8, 2, init_len=6)
    x = torch.randn(5, 8)
    r = torch.randn(5, 8)
    s0 = float(attn.temperature.detach())
    (g_log,) = torch.autograd.grad((attn(x) * r).sum(), [attn.lsa_log_scale])
    analytic = float(g_log) / s0

    def loss_at(s):
        with torch.no_grad():
            attn.lsa_log_scale.fill_(math.log(s))
            out = float((attn(x) * r).sum())
            attn.lsa_log_scale.fill_(math.log(s0))
        return out

    h = 1e-5
    yield "mhsa d/ds", rel_err(np.array([analytic]), np.array([(loss_at(s0 + h) - loss_at(s0 - h)) / (2 * h)]))

    ffn = FeedForwardHalf(8, 16)
    x = torch.randn(4, 8, requires_grad=True)
    yield "ffn_half", max(gradcheck(projected(lambda: ffn(x), x), {"x": x, **dict(ffn.named_parameters())}).values())

    conv = ConvModule(8, 3)
    yield "conv_module", max(gradcheck(projected(lambda: conv(x), x), {"x": x, **dict(conv.named_parameters())}).values())

    blk = ConformerBlock(EncoderConfig(layers=1, d_model=8, heads=2, ffn_dim=16, dropout=0.0, conv_kernel=3))
    yield "conformer_block", max(gradcheck(projected(lambda: blk(x), x), {"x": x, **dict(blk.named_parameters())}).values())

    h_in = torch.randn(5, 4, requires_grad=True)
    w, b, v = (torch.randn(*s).requires_grad_() for s in ((4, 3), (3,), (3,)))
    errs = gradcheck(projected(lambda: attentive_stats_pool(h_in, w, b, v)[0], torch.empty(8)),
                     {"h": h_in, "w": w, "b": b, "v": v})
    yield "attentive_stats_pool", max(errs.values())

    pooled = torch.randn(3, 8, requires_grad=True)
    proj = torch.randn(8, 5, requires_grad=True)
    errs = gradcheck(projected(lambda: project_xvector(pooled, proj), torch.empty(3, 5)), {"x": pooled, "proj": proj})
    yield "project_xvector", max(errs.values())

    xv = torch.randn(4, 5, requires_grad=True)
    cw = torch.randn(5, 3, requires_grad=True)
    y = torch.tensor([0, 2, 1, 2])
    yield "aam_softmax_loss", max(gradcheck(lambda: aam_softmax_loss(xv, y, cw), {"x": xv, "w": cw}).values())

    model = SpeakerModel(EncoderConfig(layers=2, d_model=8, heads=2, ffn_dim=16, dropout=0.0, conv_kernel=3),
                         HeadConfig(3, xvec_dim=4, asp_hidden=4))
    feats = torch.randn(2, 24, 80, requires_grad=True)
    labels = torch.tensor([0, 2])
    errs = gradcheck(lambda: model.compute_loss(feats, labels), {"x": feats, **dict(model.named_parameters())},
                     limit=24)
    yield "model 2L-8D-2H", max(errs.values())


@pytest.mark.usefixtures("float64")
def test_gradient_suite(acceptance):
    t0 = time.perf_counter()
    results = list(_grad_cases())
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r[1])
    ok = all(e < GRAD_TOL for _, e in results) and elapsed < GRAD_BUDGET_S
    acceptance("gradient suite", ok, f"{len(results)} operations, worst {worst[0]} rel err {worst[1]:.1e} "
               f"(tol {GRAD_TOL:.0e}), {elapsed:.1f}s (budget {GRAD_BUDGET_S:.0f}s)")


@pytest.mark.usefixtures("float64")
def test_lsa_reduction(acceptance):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        n, d = int(rng.integers(2, 65)), int(rng.integers(1, 17))
        q, k, v = (torch.from_numpy(rng.normal(size=(n, d))) for _ in range(3))
        a = length_scaled_attention(q, k, v, math.log(n)).values
        b = scaled_dot_attention(q, k, v).values
        worst = max(worst, float((a - b).abs().max()))
    acceptance("LSA reduction", worst < 1e-6, f"100 cases, n in 2..64, max abs diff {worst:.1e} (tol 1e-6)")


@pytest.mark.usefixtures("float64")
def test_rotary_relative_position(acceptance):
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(100):
        d = 2 * int(rng.integers(1, 33))
        q, k = (torch.from_numpy(rng.normal(size=(1, d))) for _ in range(2))
        i, j, delta = (int(x) for x in rng.integers(0, 1000, 3))
        a = float(rotary_embed(q, offset=i) @ rotary_embed(k, offset=j).T)
        b = float(rotary_embed(q, offset=i + delta) @ rotary_embed(k, offset=j + delta).T)
        worst = max(worst, abs(a - b))
    acceptance("rotary relative position", worst < 1e-6, f"100 cases, max abs diff {worst:.1e} (tol 1e-6)")


@pytest.mark.usefixtures("float64")
def test_sam_oracle(acceptance):
    w = torch.tensor(1.0, requires_grad=True)
    sam_step(lambda: 0.5 * w * w, [w], SamConfig(rho=0.1), SGD([w]), 0.1)
    trace_err = abs(float(w.detach()) - 0.89)

    g = torch.Generator().manual_seed(5)
    a, t = torch.randn(8, 4, generator=g), torch.randn(8, generator=g)
    init = torch.randn(4, generator=g)
    c = BaseOptConfig(peak_lr=1e-2, weight_decay=0.05, warmup_steps=10)

    def loss_of(p):
        return lambda: torch.mean((torch.tanh(a @ p) - t) ** 2)

    ours = init.clone().requires_grad_()
    opt = AdamW([ours], c)
    ref = init.clone().requires_grad_()
    ref_opt = torch.optim.AdamW([ref], lr=1.0, betas=c.betas, eps=c.eps, weight_decay=c.weight_decay)
    for s in range(1, 101):
        sam_step(loss_of(ours), [ours], SamConfig(rho=0.0), opt, lr_at(s, c))
        ref_opt.param_groups[0]["lr"] = lr_at(s, c)
        ref_opt.zero_grad()
        loss_of(ref)().backward()
        ref_opt.step()
    traj_err = float((ours - ref).detach().abs().max())
    ok = trace_err <= 1e-12 and traj_err <= 1e-12
    acceptance("SAM oracle", ok, f"quadratic hand trace |w1 - 0.89| = {trace_err:.1e}; rho=0 vs AdamW over "
               f"100 steps max diff {traj_err:.1e} (tol 1e-12)")


def test_metric_oracle(acceptance):
    rng = np.random.default_rng(13)
    worst = 0.0
    for i in range(200):
        n = int(rng.integers(4, 1001))
        lab = rng.random(n) < rng.uniform(0.05, 0.95)
        lab[0], lab[1] = True, False
        s = rng.normal(size=n) + rng.uniform(0, 3) * lab
        if i % 3 == 0:
            s = np.round(s, 1)   # ties
        t = TrialSet.from_arrays(s, lab)
        worst = max(worst, abs(compute_eer(t)[0] - brute_eer(s[lab], s[~lab])),
                    abs(compute_min_dcf(t) - brute_min_dcf(s[lab], s[~lab])))
    acceptance("metric oracle", worst <= 1e-9, f"200 trial sets, sizes 4-1000, max abs diff {worst:.1e} (tol 1e-9)")


# ---------------------------------------------------------------------------
# Desk-scale training benchmark (shared by the end-to-end and transfer criteria)

def _first_at_bar(history: list[float]) -> int | None:
    return next((e for e, v in enumerate(history, 1) if v <= E2E_EER_BAR), None)


@pytest.fixture(scope="module")
def scratch_run():
    t0 = time.perf_counter()
    cfg = RunConfig.from_dict({**DESK_SCALE, "seed": BENCH_SEED})
    train = pipeline.load_rows(pipeline.train_rows(cfg))
    heldout = pipeline.load_rows(pipeline.eval_rows(cfg))
    history: list[float] = []
    pipeline.run_training(cfg, train, heldout, lambda e, m: history.append(m.eer))
    return {"cfg": cfg, "train": train, "heldout": heldout, "history": history,
            "seconds": time.perf_counter() - t0}


@pytest.mark.slow
def test_desk_scale_end_to_end(acceptance, scratch_run):
    cfg, hist, secs = scratch_run["cfg"], scratch_run["history"], scratch_run["seconds"]
    n_train, n_heldout = len(scratch_run["train"].feats), len(scratch_run["heldout"].feats)
    ok = (len(hist) <= 30 and hist[-1] <= E2E_EER_BAR and secs <= E2E_BUDGET_S
          and cfg.encoder().name == "2L-64D-2H" and cfg.encoder().use_lsa and cfg.train().sam.enabled
          and torch.get_num_threads() == 1 and (n_train, n_heldout) == (200, 40))
    acceptance("desk-scale end-to-end", ok,
               f"{cfg.encoder().name}-{cfg.encoder().subsample}Sub, {n_train} train / {n_heldout} held-out utts, "
               f"{len(hist)} epochs, final held-out EER {hist[-1]:.3f} (bar {E2E_EER_BAR}), "
               f"{secs:.0f}s (budget {E2E_BUDGET_S}s)")


def _bitwise_transfer_ok() -> tuple[bool, str]:
    small = dict(d_model=8, heads=2, ffn_dim=16, dropout=0.0)
    torch.manual_seed(0)
    src = ParamStore.from_module(SpeakerModel(EncoderConfig(layers=6, **small), HeadConfig(4, 4, 4)))
    notes, ok = [], True
    for k in (0, 3, 6):
        torch.manual_seed(1)
        dst = SpeakerModel(EncoderConfig(layers=6, **small), HeadConfig(4, 4, 4))
        before = {n: t.clone() for n, t in dst.state_dict().items()}
        transfer_encoder(src, dst, k)
        copied = kept = 0
        for n, t in dst.state_dict().items():
            block = int(n.split(".")[2]) if n.startswith("encoder.block.") else None
            should_copy = n.startswith("encoder.") and k > 0 and (
                block is None or block < k) and (not n.startswith("encoder.final_norm") or k == 6)
            if should_copy:
                good = np.array_equal(t.numpy(), src.entries[n])
                copied += 1
            else:
                good = torch.equal(t, before[n])
                kept += 1
            ok &= good
        notes.append(f"k={k}: {copied} copied, {kept} kept")
    return ok, ", ".join(notes)


@pytest.mark.slow
def test_transfer_behaviour(acceptance, scratch_run, tmp_path):
    bitwise, notes = _bitwise_transfer_ok()
    scratch_epoch = _first_at_bar(scratch_run["history"])
    cfg = scratch_run["cfg"]
    store = make_pseudo_asr_checkpoint(cfg.encoder(), BENCH_SEED + 1)
    save_checkpoint(store, tmp_path / "asr.ckpt")
    xcfg = RunConfig.from_dict({**cfg.values, "init.checkpoint": str(tmp_path / "asr.ckpt"),
                                "init.k_blocks": cfg.encoder().layers})
    history: list[float] = []
    pipeline.run_training(xcfg, scratch_run["train"], scratch_run["heldout"],
                          lambda e, m: history.append(m.eer) or m.eer <= E2E_EER_BAR)
    xfer_epoch = _first_at_bar(history)
    ratio = math.inf if None in (scratch_epoch, xfer_epoch) else xfer_epoch / scratch_epoch
    ok = bitwise and ratio <= TRANSFER_RATIO
    acceptance("transfer behaviour", ok, f"bitwise copy {'ok' if bitwise else 'FAILED'} ({notes}); "
               f"epochs to EER <= {E2E_EER_BAR}: scratch {scratch_epoch}, transfer {xfer_epoch}, "
               f"ratio {ratio:.2f} (bar {TRANSFER_RATIO})")


def test_rtf_relative(acceptance):
    models = {}
    for name, enc in REFERENCE_CONFIGS.items():
        torch.manual_seed(0)
        models[name] = SpeakerModel(enc, HeadConfig(2))
    _, summary = bench_suite(models, 10.0, warmup=3, runs=10)
    rtf = summary["rtf"]
    ratio = rtf["6L-256D-4H-2Sub"] / rtf["6L-256D-4H"]
    ok = (rtf["12L-256D-4H"] > rtf["6L-256D-4H"] and rtf["6L-512D-8H"] > rtf["6L-256D-4H"]
          and RTF_RATIO[0] <= ratio <= RTF_RATIO[1])
    acceptance("RTF relative", ok, ", ".join(f"{n} {v:.4f}" for n, v in rtf.items())
               + f"; 2Sub/4Sub {ratio:.2f} (range {RTF_RATIO[0]}-{RTF_RATIO[1]})")


def test_determinism(acceptance, tmp_path):
    toy = {"model.layers": 2, "model.d_model": 32, "model.heads": 2, "model.ffn_dim": 64, "model.dropout": 0.1,
           "model.xvec_dim": 16, "model.asp_hidden": 8, "optim.epochs": 2, "optim.batch_size": 8,
           "optim.warmup_steps": 4, "data.n_speakers": 6, "data.utts_per_speaker": 3, "data.utt_seconds": 2.0,
           "eval.n_speakers": 3, "eval.utts_per_speaker": 2, "seed": 7}
    (tmp_path / "cfg.json").write_text(json.dumps(toy))
    cfg = str(tmp_path / "cfg.json")
    for tag in ("a", "b"):
        d = tmp_path / tag
        d.mkdir()
        codes = [
            main(["synth", "--out-dir", str(d / "ev"), "--speakers", "3", "--utts", "2", "--seconds", "1.5",
                  "--seed", "7", "--speaker-offset", "1000"]),
            main(["train", "--config", cfg, "--out", str(d / "m.ckpt"), "--heldout-log", str(d / "heldout.csv")]),
            main(["pretrain-asr", "--config", cfg, "--out", str(d / "asr.ckpt"), "--epochs", "1"]),
            main(["transfer", "--src", str(d / "asr.ckpt"), "--dst", str(d / "m.ckpt"), "--k", "2",
                  "--out", str(d / "x.ckpt")]),
            main(["extract", "--ckpt", str(d / "m.ckpt"), "--manifest", str(d / "ev" / "manifest.txt"),
                  "--out", str(d / "emb.txt")]),
            main(["score", "--embeddings", str(d / "emb.txt"), "--trials", str(d / "ev" / "trials.txt"),
                  "--out", str(d / "scores.txt")]),
            main(["eval", "--ckpt", str(d / "m.ckpt"), "--manifest", str(d / "ev" / "manifest.txt"),
                  "--trials", str(d / "ev" / "trials.txt"), "--out", str(d / "metrics.json")]),
        ]
        assert codes == [0] * len(codes), codes
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    differing = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    acceptance("determinism", not differing and len(files) >= 9,
               f"{len(files)} output files from synth/train/pretrain-asr/transfer/extract/score/eval, "
               f"{len(differing)} differ{': ' + ', '.join(differing) if differing else ''}")
