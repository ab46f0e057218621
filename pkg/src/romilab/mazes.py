"""Maze environments over shared ASCII layouts.

A layout is a rectangular block of '#' (wall), '.' (free) and 'G' (free, goal
region) characters with a fully walled border. The same layout backs two
environment kinds:

- "grid": states are (row, col) cell pairs, four move actions, deterministic.
- "continuous": a point mass with state [x, y, vx, vy] and force actions
  [fx, fy] in [-1, 1], integrated with semi-implicit Euler (velocity update
  first, then position with the new velocity).

Collisions follow the terminal-failure rule: bumping a wall ends the episode
with reward 0. On the grid the agent stays in its cell (states are never wall
cells); the point mass stops just short of the impact point with velocity
zeroed. Reaching the goal region does not end the episode unless the spec
sets goal_terminal; the shipped tasks reward staying in the region instead.

Rewards: sparse gives 1.0 iff the next state is inside the goal region,
dense gives exp(-dist(next, goal) / sigma_r).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

GRID_ACTIONS = ("up", "down", "left", "right")
GRID_DELTAS = ((-1, 0), (1, 0), (0, -1), (0, 1))

BUILTIN_LAYOUTS = ("umaze", "medium", "large")
DEFAULT_EPISODE_LIMITS = {"umaze": 300, "medium": 600, "large": 800}


@dataclass
class StepOutcome:
    next_state: object
    reward: float
    done: bool
    collided: bool


@dataclass
class MazeSpec:
    layout_id: str
    kind: str                      # "grid" | "continuous"
    rows: tuple
    walls: np.ndarray              # bool (R, C), True = blocked
    goal_cells: tuple              # ((r, c), ...)
    reward_mode: str               # "sparse" | "dense"
    episode_limit: int
    collision_rule: str = "terminal_failure"
    goal_terminal: bool = False
    dt: float = 0.1
    drag: float = 0.1
    sigma_r: float = 1.0
    goal_radius: float = 0.5
    free_cells: tuple = ()
    goal_center: np.ndarray = None          # continuous (x, y)
    _faces_v: np.ndarray = field(default=None, repr=False)  # (n, 3): x, y0, y1
    _faces_h: np.ndarray = field(default=None, repr=False)  # (n, 3): y, x0, x1

    @property
    def shape(self):
        return self.walls.shape

    @property
    def n_actions(self):
        return len(GRID_ACTIONS) if self.kind == "grid" else None


def load_layout(layout) -> tuple:
    """Return the ASCII rows for a builtin layout name or a path to a file."""
    if layout in BUILTIN_LAYOUTS:
        text = resources.files("romilab.layouts").joinpath(f"{layout}.txt").read_text()
    else:
        with open(layout) as fh:
            text = fh.read()
    rows = tuple(line for line in text.splitlines() if line.strip())
    return rows


def make_maze(layout="umaze", kind="grid", reward_mode="sparse",
              episode_limit=None, goal_terminal=False) -> MazeSpec:
    rows = load_layout(layout)
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError("layout rows must have equal length")
    if any(ch not in "#.G" for r in rows for ch in r):
        raise ValueError("layout may only contain '#', '.', 'G'")
    walls = np.array([[ch == "#" for ch in r] for r in rows], dtype=bool)
    goal_cells = tuple((r, c) for r, row in enumerate(rows)
                       for c, ch in enumerate(row) if ch == "G")
    free_cells = tuple((r, c) for r, row in enumerate(rows)
                       for c, ch in enumerate(row) if ch != "#")
    if kind not in ("grid", "continuous"):
        raise ValueError(f"unknown maze kind {kind!r}")
    if reward_mode not in ("sparse", "dense"):
        raise ValueError(f"unknown reward mode {reward_mode!r}")
    if episode_limit is None:
        episode_limit = DEFAULT_EPISODE_LIMITS.get(layout, 300)
    centers = np.array([(c + 0.5, r + 0.5) for r, c in goal_cells], dtype=float)
    goal_center = centers.mean(axis=0) if len(centers) else None
    spec = MazeSpec(
        layout_id=str(layout), kind=kind, rows=rows, walls=walls,
        goal_cells=goal_cells, reward_mode=reward_mode,
        episode_limit=int(episode_limit), goal_terminal=goal_terminal,
        free_cells=free_cells, goal_center=goal_center,
    )
    spec._faces_v, spec._faces_h = _wall_faces(walls)
    validate_maze(spec)
    return spec


def _wall_faces(walls):
    """Axis-aligned unit faces between a blocked cell and a free cell."""
    R, C = walls.shape
    vert, horz = [], []
    for r in range(R):
        for c in range(C):
            if not walls[r, c]:
                continue
            # neighbors outside the array are treated as blocked (no face)
            if c + 1 < C and not walls[r, c + 1]:
                vert.append((c + 1.0, r, r + 1.0))
            if c - 1 >= 0 and not walls[r, c - 1]:
                vert.append((float(c), r, r + 1.0))
            if r + 1 < R and not walls[r + 1, c]:
                horz.append((r + 1.0, c, c + 1.0))
            if r - 1 >= 0 and not walls[r - 1, c]:
                horz.append((float(r), c, c + 1.0))
    return (np.array(vert, dtype=float).reshape(-1, 3),
            np.array(horz, dtype=float).reshape(-1, 3))


def validate_maze(spec: MazeSpec) -> None:
    R, C = spec.shape
    border = np.concatenate([spec.walls[0], spec.walls[-1],
                             spec.walls[:, 0], spec.walls[:, -1]])
    if not border.all():
        raise ValueError("layout border must be all walls")
    if not spec.goal_cells:
        raise ValueError("layout has no goal cells")
    if spec.episode_limit < 1:
        raise ValueError("episode_limit must be >= 1")
    # every free cell must reach the goal (single connected free region)
    seen = {spec.goal_cells[0]}
    stack = [spec.goal_cells[0]]
    while stack:
        r, c = stack.pop()
        for dr, dc in GRID_DELTAS:
            nxt = (r + dr, c + dc)
            if not spec.walls[nxt] and nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    if seen != set(spec.free_cells):
        raise ValueError("free region is not fully connected to the goal")
    if spec.kind == "continuous":
        # the goal disc must sit strictly inside free space
        gap = _point_face_distance(spec.goal_center, spec._faces_v, spec._faces_h)
        if gap < spec.goal_radius:
            raise ValueError("goal disc overlaps a wall")


def _point_face_distance(p, faces_v, faces_h):
    x, y = float(p[0]), float(p[1])
    best = math.inf
    if len(faces_v):
        dy = np.clip(y, faces_v[:, 1], faces_v[:, 2]) - y
        best = min(best, float(np.sqrt((faces_v[:, 0] - x) ** 2 + dy ** 2).min()))
    if len(faces_h):
        dx = np.clip(x, faces_h[:, 1], faces_h[:, 2]) - x
        best = min(best, float(np.sqrt((faces_h[:, 0] - y) ** 2 + dx ** 2).min()))
    return best


def in_goal(spec: MazeSpec, state) -> bool:
    if spec.kind == "grid":
        return tuple(state) in set(spec.goal_cells)
    pos = np.asarray(state, dtype=float)[:2]
    return float(np.linalg.norm(pos - spec.goal_center)) <= spec.goal_radius


def goal_distance(spec: MazeSpec, state) -> float:
    if spec.kind == "grid":
        r, c = state
        return min(math.hypot(r - gr, c - gc) for gr, gc in spec.goal_cells)
    pos = np.asarray(state, dtype=float)[:2]
    return float(np.linalg.norm(pos - spec.goal_center))


def _reward(spec: MazeSpec, next_state) -> float:
    if spec.reward_mode == "sparse":
        return 1.0 if in_goal(spec, next_state) else 0.0
    return math.exp(-goal_distance(spec, next_state) / spec.sigma_r)


def state_in_bounds(spec: MazeSpec, state) -> bool:
    R, C = spec.shape
    if spec.kind == "grid":
        r, c = int(state[0]), int(state[1])
        return 0 <= r < R and 0 <= c < C
    x, y = float(state[0]), float(state[1])
    return 0.0 <= x <= C and 0.0 <= y <= R


def step(spec: MazeSpec, state, action) -> StepOutcome:
    """Pure transition function; does not mutate its inputs."""
    if spec.kind == "grid":
        return _step_grid(spec, state, action)
    return _step_continuous(spec, state, action)


def _step_grid(spec, state, action) -> StepOutcome:
    r, c = int(state[0]), int(state[1])
    dr, dc = GRID_DELTAS[int(action)]
    target = (r + dr, c + dc)
    R, C = spec.shape
    blocked = not (0 <= target[0] < R and 0 <= target[1] < C) or spec.walls[target]
    if blocked:
        return StepOutcome(next_state=(r, c), reward=0.0, done=True, collided=True)
    done = spec.goal_terminal and tuple(target) in set(spec.goal_cells)
    return StepOutcome(next_state=target, reward=_reward(spec, target),
                       done=done, collided=False)


def _step_continuous(spec, state, action) -> StepOutcome:
    s = np.asarray(state, dtype=float)
    f = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
    pos, vel = s[:2], s[2:]
    vel = vel * (1.0 - spec.drag * spec.dt) + f * spec.dt
    new_pos = pos + vel * spec.dt
    t_hit = _first_hit(pos, new_pos, spec._faces_v, spec._faces_h)
    if t_hit is not None:
        stop = pos + (new_pos - pos) * max(t_hit - 1e-6, 0.0)
        nxt = np.concatenate([stop, np.zeros(2)])
        return StepOutcome(next_state=nxt, reward=0.0, done=True, collided=True)
    nxt = np.concatenate([new_pos, vel])
    done = spec.goal_terminal and in_goal(spec, nxt)
    return StepOutcome(next_state=nxt, reward=_reward(spec, nxt),
                       done=done, collided=False)


def _first_hit(p0, p1, faces_v, faces_h):
    """Earliest parameter t in (0, 1] where the sweep p0->p1 crosses a face."""
    d = p1 - p0
    best = None
    if len(faces_v) and abs(d[0]) > 1e-12:
        t = (faces_v[:, 0] - p0[0]) / d[0]
        y = p0[1] + t * d[1]
        ok = (t > 1e-9) & (t <= 1.0) & (y >= faces_v[:, 1]) & (y <= faces_v[:, 2])
        if ok.any():
            best = float(t[ok].min())
    if len(faces_h) and abs(d[1]) > 1e-12:
        t = (faces_h[:, 0] - p0[1]) / d[1]
        x = p0[0] + t * d[0]
        ok = (t > 1e-9) & (t <= 1.0) & (x >= faces_h[:, 1]) & (x <= faces_h[:, 2])
        if ok.any():
            tmin = float(t[ok].min())
            best = tmin if best is None else min(best, tmin)
    return best


def sample_start(spec: MazeSpec, rng: np.random.Generator):
    """Uniform start over free cells (grid) or free space, zero velocity."""
    if spec.kind == "grid":
        idx = int(rng.integers(len(spec.free_cells)))
        return spec.free_cells[idx]
    R, C = spec.shape
    while True:
        x = float(rng.uniform(0.0, C))
        y = float(rng.uniform(0.0, R))
        if not spec.walls[min(int(y), R - 1), min(int(x), C - 1)]:
            return np.array([x, y, 0.0, 0.0])


def random_action(spec: MazeSpec, rng: np.random.Generator):
    if spec.kind == "grid":
        return int(rng.integers(len(GRID_ACTIONS)))
    return rng.uniform(-1.0, 1.0, size=2)
