"""CSV summaries and matplotlib figures written next to run outputs."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

SUMMARY_COLUMNS = ("model", "strategy", "bn_mode", "bits", "seed", "metric")

plt.rcParams.update({
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.labelsize": 9,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
})


def write_csv(rows: list[dict], path: str | Path, columns=SUMMARY_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_curves(records: list[dict], path: str | Path, title: str = "") -> None:
    """Eval accuracy and train loss per epoch, one line per stage."""
    by_stage = defaultdict(list)
    for r in records:
        by_stage[r["stage"]].append(r)
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(7.0, 2.8))
    for stage, recs in by_stage.items():
        epochs = [r["epoch"] for r in recs]
        ax_loss.plot(epochs, [r["train_loss"] for r in recs], marker="o", ms=3, label=stage)
        if all("eval_acc" in r for r in recs):
            ax_acc.plot(epochs, [100 * r["eval_acc"] for r in recs], marker="o", ms=3, label=stage)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("eval accuracy (%)")
    ax_acc.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_summary(rows: list[dict], path: str | Path, title: str = "") -> None:
    """Mean metric (with seed spread) per bit-width and strategy."""
    groups = defaultdict(list)
    for r in rows:
        groups[(r["strategy"], int(r["bits"]))].append(float(r["metric"]))
    strategies = sorted({s for s, _ in groups})
    bits = sorted({b for _, b in groups}, reverse=True)
    width = 0.8 / max(1, len(strategies))
    fig, ax = plt.subplots(figsize=(1.2 + 1.3 * len(bits), 2.8))
    for k, s in enumerate(strategies):
        xs, means, errs = [], [], []
        for j, b in enumerate(bits):
            vals = groups.get((s, b))
            if not vals:
                continue
            xs.append(j + (k - (len(strategies) - 1) / 2) * width)
            means.append(100 * np.mean(vals))
            errs.append(100 * np.std(vals))
        ax.bar(xs, means, width, yerr=errs, capsize=2, label=s)
    ax.set_xticks(range(len(bits)))
    ax.set_xticklabels(["FP" if b == 32 else f"{b}-bit" for b in bits])
    ax.set_ylabel("eval accuracy (%)")
    lo = min((100 * min(v) for v in groups.values()), default=0)
    ax.set_ylim(max(0, lo - 10), 100)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_flops(layers: list[dict], path: str | Path) -> None:
    """Per-layer multiplies spent on BN statistics, exact vs estimated (log scale)."""
    fig, ax = plt.subplots(figsize=(4.5, 2.8))
    idx = np.arange(len(layers))
    ax.bar(idx - 0.2, [r["exact"] for r in layers], 0.4, label="BN fold (conv)")
    ax.bar(idx + 0.2, [r["estimate"] for r in layers], 0.4, label="BN estimate")
    ax.set_yscale("log")
    ax.set_xticks(idx)
    ax.set_xticklabels([f"L{r['layer']}" for r in layers])
    ax.set_ylabel("multiplies / step")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
