"""Matplotlib report figures written next to the CSV/JSON outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_benchmark(reports: dict, path: str) -> str:
    """Bar chart of mean driving score per planner, std over seeds as error bars."""
    names = list(reports)
    means = [reports[n].ds_mean * 100 for n in names]
    stds = [reports[n].ds_std * 100 for n in names]
    fig, ax = plt.subplots(figsize=(max(4, 1.6 * len(names)), 3.2))
    ax.bar(names, means, yerr=stds, capsize=4, color="#4c72b0")
    ax.set_ylabel("driving score")
    ax.set_ylim(0, 105)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training_history(history: list[dict], path: str) -> str:
    """Waypoint and vehicle loss curves over epochs."""
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [h["waypoint_loss"] for h in history], label="waypoint L1")
    ax.plot(epochs, [h["vehicle_loss"] for h in history], label="vehicle CE")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_traces(traces: list, path: str, max_traces: int = 12) -> str:
    """Ego trajectories (left) and speed profiles (right) for a suite run."""
    fig, (ax_xy, ax_v) = plt.subplots(1, 2, figsize=(9, 3.6))
    for trace in traces[:max_traces]:
        states = np.asarray(trace.states, dtype=np.float64)
        if states.size == 0:
            continue
        ax_xy.plot(states[:, 0], states[:, 1], lw=1, label=trace.route)
        ax_v.plot(np.arange(len(states)) * 0.1, states[:, 3], lw=1)
    ax_xy.set_xlabel("x [m]")
    ax_xy.set_ylabel("y [m]")
    ax_xy.set_aspect("equal", adjustable="datalim")
    ax_xy.grid(alpha=0.3)
    ax_v.set_xlabel("time [s]")
    ax_v.set_ylabel("speed [m/s]")
    ax_v.grid(alpha=0.3)
    if len(traces) <= 6:
        ax_xy.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_rfds(results: list, path: str) -> str:
    """Bar chart of the relevance-filtered score per ranking source."""
    names = [r.source for r in results]
    scores = [r.score for r in results]
    fig, ax = plt.subplots(figsize=(max(4, 1.6 * len(names)), 3.2))
    ax.bar(names, scores, color="#dd8452")
    ax.axhline(1.0, color="#444444", lw=0.8, ls="--")
    ax.set_ylabel("restricted DS / full DS")
    ax.set_ylim(0, 1.15)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
