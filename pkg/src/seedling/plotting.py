"""Figures for bench reports.  Files only; never opens a window."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_cost_table(rows: list[dict], path) -> Path:
    """Computed versus published cost per billion frames, one bar pair per row."""
    labels = [f"{r['table']}\n{r['system']} {r['size']}" for r in rows]
    computed = np.array([r["cost"] for r in rows])
    reported = np.array([r["reported"][0] for r in rows])
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(rows)), 4))
    ax.bar(x - 0.2, computed, 0.4, label="model")
    ax.bar(x + 0.2, reported, 0.4, label="published")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("USD per 1e9 frames")
    ax.legend()
    return _save(fig, path)


def plot_latency_report(report, path) -> Path:
    """Batch-size histogram and median per-stage latency."""
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    hist = report.batch_histogram
    if hist:
        a.bar([int(k) for k in hist], list(hist.values()))
    a.set_xlabel("inference batch size")
    a.set_ylabel("batches")
    stages = report.stages_ms
    b.barh(list(stages), list(stages.values()))
    b.set_xlabel("median ms")
    b.set_title(f"p50 {report.p50_ms:.2f} ms, {report.fps:,.0f} fps", fontsize=9)
    return _save(fig, path)


def plot_mode_comparison(central, local, path) -> Path:
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.5))
    names = ["batched", "per-request"]
    a.bar(names, [central.fps, local.fps])
    a.set_ylabel("frames / s")
    b.bar(names, [central.forward_per_frame_us, local.forward_per_frame_us])
    b.set_ylabel("forward us / frame")
    return _save(fig, path)


def plot_learning_curve(records: list[dict], path, key: str = "mean_return_100") -> Path:
    pts = [(r["frames"], r[key]) for r in records if r.get(key) is not None]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if pts:
        f, v = zip(*pts)
        ax.plot(f, v)
    ax.set_xlabel("frames")
    ax.set_ylabel(key)
    return _save(fig, path)
