"""Episode files to plot-ready series: delimited tables plus rendered figures."""
from __future__ import annotations

import csv
import math
from typing import List, Optional

import numpy as np

from .geometry import Scenario, build_scenario


def series_from_episode(episode: dict) -> dict:
    """Extract per-agent time series from a parsed episode file.

    Returns t (K,), states (K, n, 4), controls (K, n, 2), d_safe (K, n),
    deadlock (K, n), resolution (K, n), agent metadata, and the final states
    appended to the positions so trajectories include the terminal point.
    """
    header, steps, footer = episode["header"], episode["steps"], episode["footer"]
    if not steps:
        raise ValueError("episode has no step records")
    ts = float(header["ts"])
    states = np.array([s["states"] for s in steps], dtype=float)
    controls = np.array([s["controls"] for s in steps], dtype=float)
    K, n = states.shape[0], states.shape[1]
    out = {
        "scenario": header.get("scenario", ""),
        "ts": ts,
        "t": np.arange(K) * ts,
        "states": states,
        "controls": controls,
        "d_safe": np.array([s.get("d_safe", [0.0] * n) for s in steps], dtype=float),
        "deadlock": np.array([s.get("deadlock", [False] * n) for s in steps], dtype=bool),
        "resolution": [s.get("resolution", [None] * n) for s in steps],
        "agents": header["agents"],
        "outcome": footer.get("outcome"),
    }
    if footer.get("final_states") is not None:
        out["final_states"] = np.array(footer["final_states"], dtype=float)
    return out


def write_series_csv(series: dict, path: str) -> None:
    """Long-format table: one row per agent per step."""
    states, controls = series["states"], series["controls"]
    K, n = states.shape[0], states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t", "agent", "x", "y", "theta", "v", "a", "w",
                    "d_safe", "deadlock", "resolution"])
        for k in range(K):
            for i in range(n):
                w.writerow([
                    k, f"{series['t'][k]:.6g}", i,
                    *(f"{v:.6g}" for v in states[k, i]),
                    *(f"{v:.6g}" for v in controls[k, i]),
                    f"{series['d_safe'][k, i]:.6g}",
                    int(series["deadlock"][k, i]),
                    series["resolution"][k][i] or "",
                ])


def _world_for(series: dict) -> Optional[Scenario]:
    name = (series.get("scenario") or "").split(":")
    try:
        return build_scenario(name[0], name[1] if len(name) > 1 else "standard")
    except Exception:
        return None  # custom geometry not embedded in the log; draw paths only


def render_figures(series: dict, outdir: str, stem: str = "episode") -> List[str]:
    """Trajectory map, speed profiles, and control traces as PNG files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Circle as MplCircle, Rectangle as MplRect

    states, controls, t = series["states"], series["controls"], series["t"]
    n = states.shape[1]
    colors = plt.cm.tab10(np.linspace(0, 1, max(n, 2)))
    paths = []

    fig, ax = plt.subplots(figsize=(8, 5))
    world = _world_for(series)
    if world is not None:
        b = world.boundary
        ax.add_patch(MplRect((b.x_min, b.y_min), b.x_max - b.x_min, b.y_max - b.y_min,
                             fill=False, ec="k", lw=1.5))
        for r in world.rects:
            ax.add_patch(MplRect((r.center.x - r.width / 2, r.center.y - r.height / 2),
                                 r.width, r.height, fc="0.82", ec="0.5"))
        for c in world.circles:
            ax.add_patch(MplCircle((c.center.x, c.center.y), c.radius, fc="0.82", ec="0.5"))
    full = states
    if "final_states" in series:
        full = np.concatenate([states, series["final_states"][None]], axis=0)
    for i, meta in enumerate(series["agents"]):
        ax.plot(full[:, i, 0], full[:, i, 1], "-", color=colors[i], lw=1.4,
                label=f"{i} ({meta.get('kind', '?')})")
        ax.plot(full[0, i, 0], full[0, i, 1], "o", color=colors[i], ms=6)
        gx, gy = meta["goal"]
        ax.plot(gx, gy, "*", color=colors[i], ms=13, mec="k", mew=0.4)
        ax.add_patch(MplCircle((full[-1, i, 0], full[-1, i, 1]), meta.get("body_radius", 0.3),
                               fill=False, ec=colors[i], lw=1.0))
    ax.set_aspect("equal")
    ax.legend(fontsize=8, loc="upper right")
    ax.set_title(f"trajectories ({series.get('outcome', '?')})")
    p = f"{outdir}/{stem}_trajectories.png"
    fig.savefig(p, dpi=110, bbox_inches="tight")
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(8, 3.2))
    for i in range(n):
        ax.plot(t, states[:, i, 3], color=colors[i], lw=1.2, label=f"agent {i}")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("v [m/s]")
    ax.axhline(0.0, color="0.7", lw=0.6)
    ax.legend(fontsize=8)
    ax.set_title("speed profiles")
    p = f"{outdir}/{stem}_speeds.png"
    fig.savefig(p, dpi=110, bbox_inches="tight")
    plt.close(fig)
    paths.append(p)

    fig, axes = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    for i in range(n):
        axes[0].plot(t, controls[:, i, 0], color=colors[i], lw=1.1, label=f"agent {i}")
        axes[1].plot(t, controls[:, i, 1], color=colors[i], lw=1.1)
    axes[0].set_ylabel("a [m/s$^2$]")
    axes[1].set_ylabel("$\\omega$ [rad/s]")
    axes[1].set_xlabel("t [s]")
    axes[0].legend(fontsize=8)
    axes[0].set_title("acceleration and turn rate")
    p = f"{outdir}/{stem}_controls.png"
    fig.savefig(p, dpi=110, bbox_inches="tight")
    plt.close(fig)
    paths.append(p)
    return paths
