"""Report figures.  Everything renders to files through the Agg backend."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or y.size < window:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


STAGE2_KEYS = ("retriever_loss", "generator_loss", "joint_loss")


def loss_curves(steps: Sequence[Mapping], path: str | Path, keys: Sequence[str] = STAGE2_KEYS,
                window: int = 10) -> Path:
    """One panel per loss key: raw values per step plus a running mean."""
    fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 3.2), sharex=True, squeeze=False)
    x = np.array([s["step"] for s in steps])
    colors = ("tab:blue", "tab:orange", "tab:green", "tab:red")
    for ax, key, color in zip(axes[0], keys, colors):
        y = np.array([s[key] for s in steps], dtype=float)
        ax.plot(x, y, color=color, alpha=0.25, lw=0.8)
        ys = _smooth(y, window)
        ax.plot(x[len(x) - len(ys):], ys, color=color, lw=1.5)
        ax.set_title(key.replace("_", " "))
        ax.set_xlabel("step")
    return _save(fig, path)


def metric_bars(runs: Mapping[str, Mapping[str, float]], path: str | Path) -> Path:
    """Grouped bars of F1 / ROUGE-L / BLEU (BLEU rescaled to [0, 1]) for named runs."""
    keys = ("f1", "rouge_l", "bleu")
    names = list(runs)
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    for i, name in enumerate(names):
        vals = [runs[name][k] / (100.0 if k == "bleu" else 1.0) for k in keys]
        ax.bar(np.arange(len(keys)) + i * width, vals, width, label=name)
    ax.set_xticks(np.arange(len(keys)) + width * (len(names) - 1) / 2)
    ax.set_xticklabels(["F1", "ROUGE-L", "BLEU/100"])
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8, frameon=False)
    return _save(fig, path)


def unique_retrieval_bars(counts: Mapping[str, int], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3.2))
    names = list(counts)
    ax.bar(names, [counts[n] for n in names], color="tab:purple")
    for i, n in enumerate(names):
        ax.annotate(str(counts[n]), (i, counts[n]), ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("unique stories retrieved")
    return _save(fig, path)
