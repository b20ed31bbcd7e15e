"""CSV tables and matplotlib figures for training runs and compressed files.

Figures use the Agg backend and are written next to the CSV they plot,
so a report directory can be produced on a headless machine.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}

LOSS_COLUMNS = ("step", "phase", "total", "fidelity", "entropy", "mask", "wavelet", "tri_rec")
SECTION_COLUMNS = ("section", "bytes", "estimated_bytes", "bits_per_anchor")


def figsize(width: float = 5.0, ratio: float = GOLDEN):
    return (width, width * ratio)


def new_figure(nrows: int = 1, ncols: int = 1, width: float = 5.0):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(nrows, ncols, figsize=figsize(width, GOLDEN * nrows / ncols), squeeze=False)
    return fig, ax


def save_figure(fig, path) -> str:
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path)
    plt.close(fig)
    return str(path)


def write_csv(path, header, rows) -> str:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return str(path)


# ---------------------------------------------------------------------------
# training history


def history_rows(history):
    return [[rec.get(c, "") for c in LOSS_COLUMNS] for rec in history]


def plot_history(history, path, n_anchors: int | None = None):
    """Total loss and entropy against step; entropy is per anchor when n_anchors is given."""
    steps = np.array([r["step"] for r in history])
    fig, ax = new_figure(1, 2, width=8.0)
    ax[0, 0].semilogy(steps, np.maximum([r["total"] for r in history], 1e-12), lw=1)
    ax[0, 0].set_xlabel("step")
    ax[0, 0].set_ylabel("total loss")
    ent = np.array([r["entropy"] for r in history], dtype=float)
    label = "entropy (bits)"
    if n_anchors:
        ent = ent / n_anchors
        label = "entropy (bits per anchor)"
    ax[0, 1].plot(steps, ent, lw=1, color="C1")
    ax[0, 1].set_xlabel("step")
    ax[0, 1].set_ylabel(label)
    warm = [r["step"] for r in history if r.get("phase") == 2]
    if warm:
        for a in ax[0]:
            a.axvline(warm[0], color="0.6", ls="--", lw=0.8)
    return save_figure(fig, path)


def write_training_report(history, outdir, n_anchors: int | None = None) -> list[str]:
    os.makedirs(outdir, exist_ok=True)
    return [
        write_csv(os.path.join(outdir, "loss.csv"), LOSS_COLUMNS, history_rows(history)),
        plot_history(history, os.path.join(outdir, "loss.png"), n_anchors),
    ]


# ---------------------------------------------------------------------------
# compressed file statistics


def section_rows(stats):
    """One row per container section: name, bytes, estimated bytes (attributes only), bits per anchor."""
    n = max(stats.n_input, 1)
    rows = []
    for name, nbytes, est in stats.rows():
        rows.append([name, nbytes, "" if est is None else f"{est:.1f}", f"{nbytes * 8 / n:.4f}"])
    return rows


def plot_sections(stats, path):
    names = [r[0] for r in stats.rows()]
    actual = np.array([r[1] for r in stats.rows()], dtype=float)
    est = np.array([np.nan if r[2] is None else r[2] for r in stats.rows()])
    x = np.arange(len(names))
    fig, ax = new_figure(width=6.0)
    a = ax[0, 0]
    a.bar(x - 0.2, actual, width=0.4, label="actual")
    a.bar(x + 0.2, np.nan_to_num(est), width=0.4, label="estimate", color="C2")
    a.set_xticks(x, names, rotation=30, ha="right")
    a.set_ylabel("bytes")
    a.set_title(f"{stats.total_bytes} B total, {stats.bits_per_anchor:.1f} bits/anchor")
    a.legend(frameon=False)
    return save_figure(fig, path)


def write_stats_report(stats, outdir) -> list[str]:
    os.makedirs(outdir, exist_ok=True)
    return [
        write_csv(os.path.join(outdir, "sections.csv"), SECTION_COLUMNS, section_rows(stats)),
        plot_sections(stats, os.path.join(outdir, "sections.png")),
    ]
