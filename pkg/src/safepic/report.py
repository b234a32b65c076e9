"""Figures written next to the CSV/JSON outputs (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

AGENT_COLORS = ("tab:blue", "tab:orange", "tab:green", "tab:red", "tab:purple", "tab:brown")


def _draw_scene(ax, cfg):
    for o in cfg.obstacles:
        ax.add_patch(plt.Circle(o.center, o.radius, color="0.6", alpha=0.6, lw=0))
    for i, (x0, g) in enumerate(zip(cfg.starts, cfg.goals)):
        c = AGENT_COLORS[i % len(AGENT_COLORS)]
        ax.plot(*x0[:2], "o", color=c, ms=5)
        ax.plot(*g, "*", color="k", ms=10)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")


def plot_trajectories(ax, cfg, trajectories, alpha=0.8):
    _draw_scene(ax, cfg)
    for traj in trajectories:
        for i in range(cfg.n_agents):
            xy = traj.states[:, i, :2]
            ax.plot(xy[:, 0], xy[:, 1], color=AGENT_COLORS[i % len(AGENT_COLORS)], lw=1.0, alpha=alpha)
            unsafe = np.any(traj.margins[:, i, :] <= 0, axis=-1) if traj.margins.size else np.zeros(len(xy), bool)
            if np.any(unsafe):
                ax.plot(xy[unsafe, 0], xy[unsafe, 1], "x", color="crimson", ms=3)


def episode_figure(path, cfg, traj, title=None) -> Path:
    """Paths in the plane plus the smallest obstacle margin over time."""
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(11, 4.5))
    plot_trajectories(ax0, cfg, [traj], alpha=1.0)
    ax0.set_title(title or f"{cfg.name} / {cfg.controller}")
    for i in range(cfg.n_agents):
        if traj.margins.shape[-1]:
            ax1.plot(traj.t, np.min(traj.margins[:, i, :], axis=-1), color=AGENT_COLORS[i % 6], label=f"agent {i}")
    ax1.axhline(0.0, color="k", lw=0.8)
    ax1.set_yscale("symlog", linthresh=1.0)
    ax1.set_xlabel("t [s]")
    ax1.set_ylabel("min_j h_j")
    ax1.legend(loc="upper right", fontsize=8)
    return _save(fig, path)


def batch_figure(path, cfg, report) -> Path:
    fig, ax = plt.subplots(figsize=(6, 5))
    plot_trajectories(ax, cfg, report.trajectories, alpha=0.6)
    s = report.summary
    ax.set_title(f"{cfg.name} / {cfg.controller}: safe {s['n_safe']}/{s['episodes']}")
    return _save(fig, path)


def compare_figure(path, cfg, reports) -> Path:
    """One panel per controller, all episodes overlaid."""
    n = len(reports)
    fig, axes = plt.subplots(1, n, figsize=(4.2 * n, 4.4), squeeze=False)
    for ax, (name, rep) in zip(axes[0], reports.items()):
        plot_trajectories(ax, cfg, rep.trajectories, alpha=0.6)
        s = rep.summary
        ax.set_title(f"{name}: safe {s['n_safe']}/{s['episodes']}", fontsize=10)
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
