"""Figures for run directories: learning curves and attention frames."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _smooth(y: np.ndarray, k: int) -> np.ndarray:
    if k <= 1 or len(y) < k:
        return y
    kernel = np.ones(k) / k
    return np.convolve(y, kernel, mode="valid")


def read_metrics(path) -> dict:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {k: np.array([float(r[k]) for r in rows]) for k in (rows[0] if rows else {})}


def learning_curves(runs: dict, out_path, smooth: int = 20) -> Path:
    """One line per run: rolling training success rate against env-steps.

    ``runs`` maps a label to a metrics CSV path.
    """
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for label, path in runs.items():
        m = read_metrics(path)
        if not m:
            continue
        x = m["env_steps"]
        for ax, key in zip(axes, ("success_rate", "mean_episode_return")):
            y = _smooth(m[key], smooth)
            ax.plot(x[len(x) - len(y):], y, lw=1.2, label=label)
    axes[0].set_ylabel("success rate (last 100 eps)")
    axes[1].set_ylabel("mean episode return")
    for ax in axes:
        ax.set_xlabel("env steps")
        ax.grid(alpha=0.3)
    axes[0].set_ylim(-0.02, 1.02)
    axes[0].legend(frameon=False, fontsize=8)
    fig.tight_layout()
    out = Path(out_path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def _wall_layer(maze, shape) -> np.ma.MaskedArray:
    h, w = min(shape[0], maze.size), min(shape[1], maze.size)
    walls = np.zeros(shape, dtype=bool)
    walls[:h, :w] = maze.grid[:h, :w]
    return np.ma.masked_where(~walls, np.ones(shape))


def attention_frames(attention: np.ndarray, poses, out_path, maze=None, mark=None,
                     steps=None, ncols: int = 8) -> Path:
    """Grid of attention maps over time; the agent is a dot, ``mark`` a hollow square."""
    T = len(attention)
    steps = list(range(T)) if steps is None else [s for s in steps if 0 <= s < T]
    if len(steps) > 32:  # keep the figure readable on long episodes
        steps = sorted(set(np.linspace(0, T - 1, 32).astype(int)))
    nrows = int(np.ceil(len(steps) / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(1.4 * ncols, 1.5 * nrows), squeeze=False)
    vmax = float(np.max(attention)) if T else 1.0
    for ax in axes.flat:
        ax.axis("off")
    for ax, t in zip(axes.flat, steps):
        ax.imshow(attention[t], cmap="magma", vmin=0.0, vmax=vmax, interpolation="nearest")
        if maze is not None:
            ax.imshow(_wall_layer(maze, attention[t].shape), cmap="Greys", alpha=0.3, vmin=0, vmax=1.5,
                      interpolation="nearest")
        x, y = poses[t][0], poses[t][1]
        ax.plot([x], [y], "o", color="c", ms=3)
        if mark is not None:
            ax.add_patch(plt.Rectangle((mark[0] - 0.5, mark[1] - 0.5), 1, 1, fill=False, ec="lime", lw=1))
        ax.set_title(f"t={t}", fontsize=7)
    fig.tight_layout(pad=0.3)
    out = Path(out_path)
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


def cell_series(attention: np.ndarray, cell, out_path, events: dict | None = None) -> Path:
    """Attention mass at one map cell over the episode, with vertical event markers."""
    series = attention[:, cell[1], cell[0]]
    fig, ax = plt.subplots(figsize=(5, 2.6))
    ax.plot(series, lw=1.2, color="k")
    ax.axhline(series.mean(), ls=":", color="grey", lw=1, label="episode mean")
    for name, t in (events or {}).items():
        if t is not None:
            ax.axvline(t, lw=1, color={"wrong goal seen": "r", "correct goal seen": "g"}.get(name, "b"),
                       label=name)
    ax.set_xlabel("step")
    ax.set_ylabel(f"alpha at {tuple(cell)}")
    ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    out = Path(out_path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
