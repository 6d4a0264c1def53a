"""Figure rendering for the report path.

Every CSV the pipeline writes gets a PNG sibling: training curves, the
accuracy-vs-throughput grid, and the total-correlation comparison. CSV
remains the asserted contract; the figures are for eyeballs.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def render_loss_curves(log_csv_path, out_path) -> Path:
    steps, total, ddo, path_term = [], [], [], []
    with open(log_csv_path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            steps.append(int(row["step"]))
            total.append(float(row["loss_total"]))
            ddo.append(float(row["loss_ddo"]))
            path_term.append(float(row["loss_path"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, total, label="total", lw=1.2)
    if any(ddo):
        ax.plot(steps, ddo, label="discriminative", lw=0.9, alpha=0.8)
    if any(path_term):
        ax.plot(steps, path_term, label="path", lw=0.9, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return Path(out_path)


def render_eval_grid(reports, out_path, title: str = "") -> Path:
    """Accuracy vs tokens-per-step, one line per (label, block size).

    `reports` maps a label (e.g. checkpoint name) to a list of EvalReport.
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, rows in reports.items():
        by_block = defaultdict(list)
        for r in rows:
            by_block[r.block_size].append((r.tokps, r.accuracy))
        for block, pts in sorted(by_block.items()):
            pts.sort()
            ax.plot(
                [p[0] for p in pts],
                [p[1] for p in pts],
                marker="o",
                label=f"{label} B={block}",
            )
    ax.set_xlabel("tokens per step")
    ax.set_ylabel("exact match")
    ax.set_ylim(-0.02, 1.02)
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return Path(out_path)


def render_tc_report(rows, out_path) -> Path:
    """Bar chart of the total-correlation report rows."""
    names = [r.quantity for r in rows]
    vals = [r.value for r in rows]
    errs = [2 * r.std_err for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(names)), vals, yerr=errs, capsize=3)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("nats")
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return Path(out_path)
