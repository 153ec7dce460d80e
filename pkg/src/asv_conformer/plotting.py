"""Figures for the report paths of the CLI: DET curve, loss curve, RTF bars."""

from __future__ import annotations

from statistics import NormalDist

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"figure.dpi": 100, "savefig.dpi": 150, "font.size": 9, "axes.grid": True,
       "grid.alpha": 0.3, "axes.spines.top": False, "axes.spines.right": False,
       "svg.hashsalt": "asv-conformer"}
_DET_TICKS = [0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4]
# metadata=None drops the creation date so re-runs write identical files
_SAVE = {"metadata": {"Software": None}}


def _probit(p) -> np.ndarray:
    nd = NormalDist()
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-6, 1 - 1e-6)
    return np.array([nd.inv_cdf(float(x)) for x in p.ravel()]).reshape(p.shape)


def plot_det(far, frr, path, eer: float | None = None, label: str | None = None) -> None:
    """Miss rate against false-alarm rate on normal-deviate axes."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.2, 4.2))
        ax.plot(_probit(far), _probit(frr), lw=1.5, label=label)
        if eer is not None:
            ax.plot(_probit(eer), _probit(eer), "o", ms=5, color="C3", label=f"EER {100 * eer:.2f}%")
        ticks = _probit(_DET_TICKS)
        names = [f"{100 * t:g}" for t in _DET_TICKS]
        ax.set_xticks(ticks, names)
        ax.set_yticks(ticks, names)
        lim = (_probit(0.0005), _probit(0.5))
        ax.set_xlim(lim)
        ax.set_ylim(lim)
        ax.plot(lim, lim, ls=":", lw=0.8, color="0.5")
        ax.set_xlabel("false alarm rate (%)")
        ax.set_ylabel("miss rate (%)")
        if eer is not None or label:
            ax.legend(loc="upper right", frameon=False)
        fig.tight_layout()
        fig.savefig(path, **_SAVE)
        plt.close(fig)


def plot_loss(rows, path) -> None:
    """Per-step training loss with per-epoch means and the learning rate on a twin axis."""
    steps = np.array([r.step for r in rows])
    loss = np.array([r.loss for r in rows])
    lr = np.array([r.lr for r in rows])
    epochs = sorted({r.epoch for r in rows})
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3.4))
        ax.plot(steps, loss, lw=0.6, alpha=0.5, color="C0", label="step")
        ends = [max(r.step for r in rows if r.epoch == e) for e in epochs]
        means = [np.mean([r.loss for r in rows if r.epoch == e]) for e in epochs]
        ax.plot(ends, means, "o-", ms=3, color="C0", label="epoch mean")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        twin = ax.twinx()
        twin.plot(steps, lr, lw=1, color="C1")
        twin.set_ylabel("learning rate", color="C1")
        twin.grid(False)
        ax.legend(loc="upper right", frameon=False)
        fig.tight_layout()
        fig.savefig(path, **_SAVE)
        plt.close(fig)


def plot_rtf(rtf: dict[str, float], path) -> None:
    """Horizontal bars of real-time factor, one per model name."""
    names = list(rtf)
    vals = [rtf[n] for n in names]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 0.5 * len(names) + 1.2))
        y = np.arange(len(names))
        ax.barh(y, vals, color="C2")
        for yi, v in zip(y, vals):
            ax.text(v, yi, f" {v:.4f}", va="center", fontsize=8)
        ax.set_yticks(y, names)
        ax.invert_yaxis()
        ax.set_xlabel("real-time factor (single thread)")
        ax.set_xlim(0, max(vals) * 1.25 if vals else 1)
        fig.tight_layout()
        fig.savefig(path, **_SAVE)
        plt.close(fig)
