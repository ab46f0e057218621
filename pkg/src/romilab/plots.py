"""SVG figures: maze trajectory overlays and per-arm metric bars."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .mazes import MazeSpec

ARM_COLORS = {"base": "#777777", "romi": "#1f77b4", "fomi": "#d62728"}


def _draw_maze(ax, spec: MazeSpec):
    R, C = spec.shape
    for r in range(R):
        for c in range(C):
            if spec.walls[r, c]:
                ax.add_patch(plt.Rectangle((c, r), 1, 1, color="#333333"))
    for r, c in spec.goal_cells:
        ax.add_patch(plt.Rectangle((c, r), 1, 1, color="#8fd694", alpha=0.8))
    ax.set_xlim(0, C)
    ax.set_ylim(R, 0)  # row 0 on top, matching the layout text
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])


def _traj_xy(spec: MazeSpec, traj: np.ndarray):
    traj = np.asarray(traj, dtype=float)
    if spec.kind == "grid":
        # cell centers; (row, col) -> (x, y)
        return traj[:, 1] + 0.5, traj[:, 0] + 0.5
    return traj[:, 0], traj[:, 1]


def plot_trajectories(spec: MazeSpec, batches: dict, path,
                      max_per_arm: int = 10) -> None:
    """One panel per arm, a sample of executed trajectories overlaid."""
    arms = list(batches)
    fig, axes = plt.subplots(1, len(arms), figsize=(4 * len(arms), 4))
    if len(arms) == 1:
        axes = [axes]
    for ax, arm in zip(axes, arms):
        _draw_maze(ax, spec)
        color = ARM_COLORS.get(arm, "#1f77b4")
        batch = batches[arm]
        for traj, collided in list(zip(batch.trajectories,
                                       batch.collisions))[:max_per_arm]:
            x, y = _traj_xy(spec, traj)
            jx = np.random.default_rng(len(traj)).normal(0, 0.06, size=len(x))
            ax.plot(x + jx, y + jx, color=color, alpha=0.6, lw=1.2)
            marker = "x" if collided else "o"
            ax.plot(x[-1] + jx[-1], y[-1] + jx[-1], marker, color=color, ms=6)
        ax.set_title(f"{arm}  success {batch.successes.mean():.2f}  "
                     f"collide {batch.collisions.mean():.2f}", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_arm_bars(reports: list, metrics: tuple, path, title: str = "") -> None:
    """Grouped per-arm bars (mean over seeds) with per-seed dots."""
    arms = []
    for r in reports:
        if r.arm not in arms:
            arms.append(r.arm)
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.4))
    if len(metrics) == 1:
        axes = [axes]
    for ax, metric in zip(axes, metrics):
        for i, arm in enumerate(arms):
            vals = [getattr(r, metric) for r in reports if r.arm == arm]
            color = ARM_COLORS.get(arm, "#1f77b4")
            ax.bar(i, float(np.mean(vals)), color=color, alpha=0.75, width=0.6)
            ax.plot([i] * len(vals), vals, "k.", ms=5)
        ax.set_xticks(range(len(arms)))
        ax.set_xticklabels(arms)
        ax.set_title(metric.replace("_", " "), fontsize=10)
        ax.grid(axis="y", alpha=0.3)
    if title:
        fig.suptitle(title, fontsize=11)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_distance_heatmap(spec: MazeSpec, dataset, path, title: str = "") -> None:
    """Per-cell distance to the nearest dataset state (walls masked out)."""
    from scipy.spatial import cKDTree

    states = dataset.states() if hasattr(dataset, "states") else np.asarray(dataset)
    if spec.kind == "grid":
        points = states[:, :2]
        queries = np.array(spec.free_cells, dtype=float)
    else:
        # dataset carries (x, y, vx, vy); the map is over cell centers
        points = states[:, :2]
        queries = np.array([(c + 0.5, r + 0.5) for r, c in spec.free_cells])
    dist, _ = cKDTree(points).query(queries)
    R, C = spec.shape
    grid = np.full((R, C), np.nan)
    for (r, c), d in zip(spec.free_cells, dist):
        grid[r, c] = d
    fig, ax = plt.subplots(figsize=(4.5, 4.5 * R / max(C, 1)))
    masked = np.ma.masked_invalid(grid)
    im = ax.imshow(masked, cmap="viridis", origin="upper")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, shrink=0.85, label="distance to nearest dataset state")
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_sweep(rows: list, x_field: str, y_fields: tuple, path,
               title: str = "") -> None:
    """Line plot of aggregate metrics vs a swept parameter.

    rows: list of dicts with x_field and the y_fields (already aggregated).
    """
    xs = [row[x_field] for row in rows]
    order = np.argsort(xs)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for y in y_fields:
        ys = [rows[i][y] for i in order]
        ax.plot(np.asarray(xs)[order], ys, "o-", label=y.replace("_", " "))
    ax.set_xlabel(x_field.replace("_", " "))
    ax.grid(alpha=0.3)
    ax.legend(fontsize=9)
    if title:
        ax.set_title(title, fontsize=11)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
