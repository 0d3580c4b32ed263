"""Figures written next to the CSV/JSON outputs (Agg backend, files only)."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

plt.rcParams["figure.dpi"] = 120
plt.rcParams["savefig.bbox"] = "tight"
plt.rcParams["axes.spines.top"] = False
plt.rcParams["axes.spines.right"] = False

CURVE_TERMS = ("total", "l1", "giou", "fg", "rank", "cta", "vld")


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_curves(rows, path, smooth=10):
    """Per-step loss terms with a trailing moving average."""
    fig, ax = plt.subplots(figsize=(6.5, 3.5))
    steps = np.array([r["step"] for r in rows], dtype=float)
    for term in CURVE_TERMS:
        y = np.array([r[term] for r in rows], dtype=float)
        if len(y) == 0 or not np.any(y):
            continue
        k = max(1, min(smooth, len(y)))
        ys = np.convolve(y, np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1:], ys, label=term, lw=1.2 if term == "total" else 0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-2)
    if ax.lines:
        ax.legend(ncol=4, fontsize=7, frameon=False)
    return _save(fig, path)


def plot_ablation(rows, path, fields=("r1_at_05", "r1_at_07", "map_avg", "hit_at_1")):
    """Grouped bars: mean over seeds per variant, whiskers at min/max."""
    by_variant = defaultdict(list)
    for r in rows:
        by_variant[r["variant"]].append(r)
    variants = list(by_variant)
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(variants) * len(fields) / 2, 3.2))
    width = 0.8 / max(len(variants), 1)
    x = np.arange(len(fields))
    for i, v in enumerate(variants):
        vals = np.array([[float(r[f]) for f in fields] for r in by_variant[v]])
        mean = vals.mean(0)
        err = np.vstack([mean - vals.min(0), vals.max(0) - mean])
        ax.bar(x + (i - (len(variants) - 1) / 2) * width, mean, width, yerr=err, capsize=2, label=v)
    ax.set_xticks(x)
    ax.set_xticklabels(fields)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7, frameon=False)
    return _save(fig, path)


def plot_saliency_examples(records, corpus, path, count=4):
    """Predicted saliency against ground truth with the top-ranked window shaded."""
    gts = {p.video_id: p for p in corpus.pairs}
    chosen = [r for r in records if r["video_id"] in gts][:count]
    fig, axes = plt.subplots(len(chosen) or 1, 1, figsize=(6.5, 1.6 * max(len(chosen), 1)), squeeze=False)
    for ax, rec in zip(axes[:, 0], chosen):
        pair = gts[rec["video_id"]]
        L = len(pair.gt_saliency)
        t = (np.arange(L) + 0.5) / L
        pred = np.asarray(rec["pred_saliency"], dtype=float)
        span = max(pred.max() - pred.min(), 1e-12)
        ax.plot(t, (pred - pred.min()) / span, color="C0", label="predicted (rescaled)")
        ax.plot(t, pair.gt_saliency, color="k", ls="--", lw=0.8, label="ground truth")
        for s in pair.gt_spans:
            ax.axvspan(s.start, s.end, color="0.85", zorder=0)
        if rec["pred_spans"]:
            s, e = rec["pred_spans"][0][:2]
            ax.axvspan(s, e, ymin=0.92, ymax=1.0, color="C3")
        ax.set_xlim(0, 1)
        ax.set_ylim(-0.05, 1.1)
        ax.set_ylabel(rec["video_id"], fontsize=7)
    axes[0, 0].legend(fontsize=7, frameon=False, loc="upper right")
    axes[-1, 0].set_xlabel("normalized time")
    return _save(fig, path)
