"""Static figures from metric logs. Nothing here touches a model."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_jsonl(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def plot_powerset(rows: list[dict], path: str | Path, metric: str = "miou") -> Path:
    """One bar per presence subset, baseline (empty subset) drawn as a line."""
    names = [r["subset"] for r in rows]
    vals = np.array([r[metric] for r in rows]) * 100
    fig, ax = plt.subplots(figsize=(10, 4))
    ax.bar(range(len(vals)), vals, color="tab:blue")
    base = [r for r in rows if r["subset"] == "none"]
    if base:
        ax.axhline(base[0][metric] * 100, color="k", lw=1, ls="--", label="empty subset")
        ax.legend(loc="lower right")
    ax.set_xticks(range(len(vals)), names, rotation=60, ha="right", fontsize=8)
    ax.set_ylabel(f"{metric} (%)")
    ax.set_title("test-time prior subsets")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_training_curves(logs: dict[str, str | Path], path: str | Path) -> Path:
    """Total loss and alpha per epoch for each labelled metrics.jsonl."""
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(10, 4))
    for label, p in logs.items():
        recs = [r for r in read_jsonl(p) if r.get("event") == "epoch"]
        ep = [r["epoch"] for r in recs]
        ax_l.plot(ep, [r["total"] for r in recs], label=label)
        ax_a.plot(ep, [r["alpha"] for r in recs], label=label)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("training loss")
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("residual scale alpha")
    ax_l.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_fusion_order(results: dict[str, list[float]], path: str | Path) -> Path:
    """Per-seed mIoU for each fusion order, with the seed mean as a bar."""
    labels = list(results)
    fig, ax = plt.subplots(figsize=(4, 4))
    for i, k in enumerate(labels):
        v = np.asarray(results[k]) * 100
        ax.bar(i, v.mean(), color="tab:orange", alpha=0.6)
        ax.scatter(np.full(len(v), i), v, color="k", s=12, zorder=3)
    ax.set_xticks(range(len(labels)), labels)
    ax.set_ylabel("mIoU (%)")
    ax.set_title("fusion order")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
