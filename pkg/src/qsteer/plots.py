"""PNG figures written next to the CSV outputs.

matplotlib is imported lazily with the non-interactive Agg backend, so the
library itself never needs a display.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from qsteer.trainer import EpisodeRecord


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _metric(records: Sequence[EpisodeRecord], metric: str) -> np.ndarray:
    if metric == "fidelity":
        return np.array([np.nan if r.terminal_fidelity is None else r.terminal_fidelity for r in records])
    return np.array([r.steps for r in records], dtype=float)


def learning_curve(records: Sequence[EpisodeRecord], metric: str, path: str | Path, title: str = "") -> Path:
    """Steps (or terminal fidelity) and mean exploration entropy per episode."""
    plt = _pyplot()
    ep = np.array([r.episode for r in records])
    fig, (top, bottom) = plt.subplots(2, 1, sharex=True, figsize=(7, 5.5))
    top.plot(ep, _metric(records, metric), lw=0.8)
    top.set_ylabel("terminal fidelity" if metric == "fidelity" else "steps per episode")
    if metric == "steps":
        top.set_yscale("log")
    bottom.plot(ep, [r.mean_entropy for r in records], lw=0.8, color="tab:orange")
    bottom.set_ylabel("mean entropy (bits)")
    bottom.set_xlabel("episode")
    if title:
        top.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def comparison(runs: Mapping[str, Sequence[Sequence[EpisodeRecord]]], metric: str, path: str | Path) -> Path:
    """Per-strategy median over seeds of the progress metric, one line each."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name in sorted(runs):
        seeds = [r for r in runs[name] if r]
        if not seeds:
            continue
        n = min(len(r) for r in seeds)
        stack = np.vstack([_metric(r[:n], metric) for r in seeds])
        ax.plot(np.arange(n), np.nanmedian(stack, axis=0), lw=0.9, label=f"{name} ({len(seeds)} seeds)")
    ax.set_xlabel("episode")
    ax.set_ylabel("median terminal fidelity" if metric == "fidelity" else "median steps per episode")
    if metric == "steps":
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def trajectory(
    actions: Sequence[int],
    fidelities: Sequence[float | None],
    path: str | Path,
    populations: np.ndarray | None = None,
    action_axis: str = "action",
) -> Path:
    """Control sequence over time with fidelity (and level populations if given)."""
    plt = _pyplot()
    steps = np.arange(1, len(actions) + 1)
    fig, (top, bottom) = plt.subplots(2, 1, sharex=True, figsize=(7, 5.5))
    top.step(steps, actions, where="mid", lw=0.9)
    top.set_ylabel(action_axis)
    if populations is not None and populations.size:
        for i in range(populations.shape[1]):
            bottom.plot(steps, populations[:, i], lw=0.9, label=f"|{i + 1}>")
        bottom.set_ylabel("population")
        bottom.legend()
    else:
        fid = np.array([np.nan if f is None else f for f in fidelities])
        bottom.plot(steps, fid, lw=0.9)
        bottom.set_ylabel("fidelity")
    bottom.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
