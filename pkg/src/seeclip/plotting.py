"""Static figures from run artifacts: loss curves, attention heatmaps, metric bars."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_KEYS = ("align", "repulse", "cohere", "regularize", "total")


def read_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_loss_curves(records: list[dict], out: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [r["step"] for r in records]
    for key in LOSS_KEYS:
        ax.plot(steps, [r[key] for r in records], label=key, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-2)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def read_attention_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def plot_attention(weights: np.ndarray, out: Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(max(3, 0.4 * weights.shape[1] + 1), 0.5 * weights.shape[0] + 1.2))
    im = ax.imshow(weights, aspect="auto", cmap="viridis", vmin=0)
    ax.set_xlabel("patch")
    ax.set_ylabel("head")
    ax.set_title(title, fontsize=8)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_metric_bars(reports: list[dict], out: Path) -> Path:
    names = [r["target_domain"] for r in reports]
    keys = ("closed_acc", "known_acc", "unknown_acc", "h_score")
    x = np.arange(len(names))
    width = 0.8 / len(keys)
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(names), 4))
    for i, k in enumerate(keys):
        ax.bar(x + i * width, [r.get(k) or 0.0 for r in reports], width, label=k)
    ax.set_xticks(x + 0.4 - width / 2, names)
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_inputs(inputs: Iterable[str | Path], out_dir: str | Path) -> list[Path]:
    """Dispatch on file type: ``.jsonl`` logs, ``.csv`` attention maps (or a
    directory of them), ``.json`` reports."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for item in inputs:
        p = Path(item)
        paths = sorted(p.glob("*.csv")) if p.is_dir() else [p]
        for f in paths:
            if f.suffix == ".jsonl":
                written.append(plot_loss_curves(read_log(f), out / f"{f.stem}_losses.png"))
            elif f.suffix == ".csv":
                written.append(plot_attention(read_attention_csv(f), out / f"{f.stem}_attention.png", f.stem))
            elif f.suffix == ".json":
                doc = json.loads(f.read_text())
                reports = doc.get("reports") if isinstance(doc, dict) and "reports" in doc else [doc]
                if reports and "h_score" in reports[0]:
                    written.append(plot_metric_bars(reports, out / f"{f.stem}_metrics.png"))
            else:
                raise ValueError(f"don't know how to plot {f}")
    return written
