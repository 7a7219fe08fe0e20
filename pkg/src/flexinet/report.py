"""Report rendering: matplotlib figures written next to the delimited output.

Every evaluation or analysis command emits three artifact flavors into
its output directory: machine-readable JSON, delimited CSV, and PNG
figures rendered with the Agg backend (no display required).
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import SCENES, EnergyHistogram, EvalReport


def render_confusion_matrix(report: EvalReport, path):
    fig, ax = plt.subplots(figsize=(7.2, 6.0))
    cm = report.confusion
    im = ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(len(SCENES)))
    ax.set_yticks(range(len(SCENES)))
    short = [s.replace("_", "\n") for s in SCENES]
    ax.set_xticklabels(short, fontsize=7, rotation=45, ha="right")
    ax.set_yticklabels(short, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    thresh = cm.max() / 2 if cm.max() else 0.5
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            if cm[i, j]:
                ax.text(j, i, str(cm[i, j]), ha="center", va="center", fontsize=7,
                        color="white" if cm[i, j] > thresh else "black")
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_title(f"confusion matrix ({report.n_clips} clips)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_device_accuracy(report: EvalReport, path):
    devices = list(report.per_device.keys())
    accs = [100 * report.per_device[d] for d in devices]
    colors = ["#2c7fb8" if d in ("A", "B", "C") else
              "#7fcdbb" if d in ("S1", "S2", "S3") else "#fe9929"
              for d in devices]
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.bar(devices, accs, color=colors)
    ax.axhline(100 * report.macro_acc, color="k", linestyle="--", linewidth=1,
               label=f"macro {100 * report.macro_acc:.1f}%")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 105)
    ax.legend(loc="lower left", fontsize=8)
    ax.set_title("per-device accuracy (real / seen sim / unseen sim)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_energy_histogram(hist: EnergyHistogram, path, threshold=None):
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    widths = np.diff(hist.edges)
    ax.bar(hist.edges[:-1], hist.counts, width=widths, align="edge",
           color="#74a9cf", edgecolor="k", linewidth=0.3)
    ax.axvline(hist.mean, color="k", linestyle="--", linewidth=1,
               label=f"mean {hist.mean:.1f}")
    if threshold is not None:
        ax.axvline(threshold, color="#d7301f", linestyle=":", linewidth=1.2,
                   label=f"threshold {threshold:g}")
    ax.set_xlabel("clip energy (sum of squared samples)")
    ax.set_ylabel("clips")
    ax.legend(fontsize=8)
    ax.set_title(f"clip energy distribution ({hist.n_clips} clips)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_training_curves(history: list, path):
    if not history:
        return
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.plot(epochs, [h["loss"] for h in history], label="train loss", color="#2c7fb8")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if any("test_macro_acc" in h for h in history):
        ax2 = ax.twinx()
        pts = [(h["epoch"], 100 * h["test_macro_acc"]) for h in history
               if "test_macro_acc" in h]
        ax2.plot(*zip(*pts), label="test macro acc", color="#d7301f")
        ax2.set_ylabel("accuracy (%)")
        ax2.set_ylim(0, 105)
    ax.set_title("training")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_energy_csv(hist: EnergyHistogram, path):
    with open(path, "w") as f:
        f.write("bin_left,bin_right,count\n")
        for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            f.write(f"{lo},{hi},{c}\n")
        f.write(f"mean,{hist.mean},\n")


def write_eval_outputs(report: EvalReport, out_dir):
    """JSON + CSV + figures for one evaluation run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save_json(out_dir / "report.json")
    report.save_csv(out_dir / "device_accuracy.csv")
    np.savetxt(out_dir / "confusion_matrix.csv", report.confusion,
               fmt="%d", delimiter=",", header=",".join(SCENES), comments="")
    render_confusion_matrix(report, out_dir / "confusion_matrix.png")
    render_device_accuracy(report, out_dir / "device_accuracy.png")
    with open(out_dir / "report.txt", "w") as f:
        f.write(report.text_table() + "\n")
