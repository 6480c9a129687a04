"""Figures rendered next to the CSV reports (matplotlib, non-interactive backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import EvalReport  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_bench(report: EvalReport, path):
    """Runtime against clip length, one line per decoder, log scale."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for dec in dict.fromkeys(report.column("decoder")):
        rows = sorted(report.where(decoder=dec), key=lambda r: r["length_s"])
        ax.plot([r["length_s"] for r in rows], [r["runtime_s"] for r in rows], "o-", label=dec)
    ax.set_yscale("log")
    ax.set_xlabel("clip length (s)")
    ax.set_ylabel("decode time (s)")
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_guidance(report: EvalReport, path):
    """LSD and per-codebook accuracy against the guidance weight."""
    w = np.array(report.column("w"), dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(w, report.column("lsd"), "s-", color="k", label="LSD")
    ax.set_xlabel("guidance weight w")
    ax.set_ylabel("LSD")
    ax2 = ax.twinx()
    for c in [c for c in report.columns if c.startswith("acc_")]:
        ax2.plot(w, report.column(c), "o--", alpha=0.7, label=c)
    ax2.set_ylabel("token accuracy")
    lines = ax.get_legend_handles_labels()
    more = ax2.get_legend_handles_labels()
    ax.legend(lines[0] + more[0], lines[1] + more[1], fontsize=8, loc="best")
    return _save(fig, path)


def plot_evaluation(report: EvalReport, path):
    """Per-clip LSD of the corrupted input against the restored output."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    tags = list(dict.fromkeys(report.column("tag")))
    for tag in tags:
        rows = report.where(tag=tag)
        ax.scatter([r["lsd_corrupted"] for r in rows], [r["lsd_restored"] for r in rows],
                   label=tag or "all", s=18)
    lim = max(max(report.column("lsd_corrupted"), default=1), max(report.column("lsd_restored"), default=1))
    ax.plot([0, lim], [0, lim], "k:", lw=1)
    ax.set_xlabel("LSD corrupted")
    ax.set_ylabel("LSD restored")
    if len(tags) > 1:
        ax.legend(fontsize=8)
    return _save(fig, path)


def plot_loss(history, path, smooth=50):
    h = np.asarray(history, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(h, alpha=0.3, lw=0.8)
    if len(h) >= smooth:
        k = np.ones(smooth) / smooth
        ax.plot(np.arange(smooth - 1, len(h)), np.convolve(h, k, mode="valid"), lw=1.5)
    ax.set_xlabel("step")
    ax.set_ylabel("masked cross-entropy")
    ax.grid(alpha=0.3)
    return _save(fig, path)
