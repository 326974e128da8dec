"""Figure rendering for training traces, sweeps and benchmark tables.

Every CSV the CLI emits gets a companion PNG so runs can be eyeballed
without loading the delimited output anywhere.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_trace(trace: list[dict], path) -> None:
    """Loss terms, layer-1 MI and gate state over epochs."""
    epochs = [row["epoch"] for row in trace]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    ax = axes[0]
    for key in ("total", "recon[1]", "cpc[1]", "commit[1]", "recon[2]", "cpc[2]"):
        ys = [row.get(key) for row in trace]
        if any(y is not None for y in ys):
            ax.plot(epochs, [y if y is not None else np.nan for y in ys], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    ax.set_title("loss terms")

    ax = axes[1]
    ax.plot(epochs, [row.get("mi_layer1", np.nan) for row in trace], label="layer-1 MI")
    gate = [row.get("gate_active", 0) for row in trace]
    ax.plot(epochs, gate, label="gate active", drawstyle="steps-post")
    if any(row.get("gate_activated_now") for row in trace):
        e = next(row["epoch"] for row in trace if row.get("gate_activated_now"))
        ax.axvline(e, color="k", linestyle=":", linewidth=1)
    ax.set_xlabel("epoch")
    ax.legend(fontsize=7)
    ax.set_title("warm-start gate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(rows: list[dict], x_key: str, y_keys: list[str], path,
               title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [row[x_key] for row in rows]
    numeric_x = all(isinstance(x, (int, float)) for x in xs)
    pos = xs if numeric_x else np.arange(len(xs))
    for y in y_keys:
        ax.plot(pos, [row.get(y, np.nan) for row in rows], marker="o", label=y)
    if not numeric_x:
        ax.set_xticks(pos)
        ax.set_xticklabels([str(x) for x in xs], rotation=20, ha="right")
    ax.set_xlabel(x_key)
    ax.legend(fontsize=8)
    ax.set_title(title or x_key)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_reports(reports: list[dict], path) -> None:
    """Bar chart of report rows grouped by task/metric."""
    labels = [f"{r['task']}:{r['direction']}:{r['metric']}:{r['mode']}" for r in reports]
    values = [r["value"] for r in reports]
    fig, ax = plt.subplots(figsize=(max(6, 0.4 * len(labels)), 4))
    ax.bar(np.arange(len(values)), values)
    ax.set_xticks(np.arange(len(values)))
    ax.set_xticklabels(labels, rotation=75, ha="right", fontsize=6)
    ax.set_ylabel("value")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
