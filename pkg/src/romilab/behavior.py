"""Waypoint-wandering behavior policies and offline dataset generation.

The behavior agent repeatedly samples a random free cell as a waypoint,
follows a BFS shortest path toward it, and re-targets immediately on arrival,
so it never idles. It only ever takes legal moves, which is what makes the
logged data wall-blind: no collision is ever recorded. On the continuous maze
a PD controller tracks the BFS lattice path; in the unlikely event the
controller clips a corner, the episode is cut at the last safe transition and
the collision itself is never emitted.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .buffers import Transition, TransitionBuffer
from .mazes import GRID_DELTAS, MazeSpec, random_action, sample_start, step


@dataclass
class PlannerConfig:
    kp: float = 1.0
    kd: float = 3.0
    cell_tol: float = 0.35      # advance to the next path cell within this radius
    waypoint_tol: float = 0.4   # waypoint counts as reached within this radius


def bfs_path(walls: np.ndarray, start, goal):
    """Shortest 4-connected path as a list of cells, start and goal included."""
    start, goal = tuple(start), tuple(goal)
    if start == goal:
        return [start]
    parent = {start: None}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for dr, dc in GRID_DELTAS:
            nxt = (cur[0] + dr, cur[1] + dc)
            if walls[nxt] or nxt in parent:
                continue
            parent[nxt] = cur
            if nxt == goal:
                path = [nxt]
                while path[-1] != start:
                    path.append(parent[path[-1]])
                return path[::-1]
            queue.append(nxt)
    raise ValueError(f"no path from {start} to {goal}")


def _action_toward(cell, nxt):
    delta = (nxt[0] - cell[0], nxt[1] - cell[1])
    return GRID_DELTAS.index(delta)


def _cell_of(spec, state):
    if spec.kind == "grid":
        return tuple(state)
    R, C = spec.shape
    x, y = float(state[0]), float(state[1])
    return (min(int(y), R - 1), min(int(x), C - 1))


def _center(cell):
    return np.array([cell[1] + 0.5, cell[0] + 0.5])


class WaypointPolicy:
    """Stateful wandering policy; also serves as the score-reference expert."""

    def __init__(self, spec: MazeSpec, rng: np.random.Generator,
                 cfg: PlannerConfig = None):
        self.spec = spec
        self.rng = rng
        self.cfg = cfg or PlannerConfig()
        self.path = None
        self.ptr = 0

    def reset(self, state):
        self._new_waypoint(state)

    def _new_waypoint(self, state):
        cell = _cell_of(self.spec, state)
        free = self.spec.free_cells
        while True:
            target = free[int(self.rng.integers(len(free)))]
            if target != cell:
                break
        self.path = bfs_path(self.spec.walls, cell, target)
        self.ptr = 1  # path[0] is the current cell

    def act(self, state):
        if self.spec.kind == "grid":
            return self._act_grid(tuple(state))
        return self._act_continuous(np.asarray(state, dtype=float))

    def _act_grid(self, cell):
        if self.ptr < len(self.path) and cell == self.path[self.ptr]:
            self.ptr += 1
        if self.ptr >= len(self.path):
            self._new_waypoint(cell)
        if cell != self.path[self.ptr - 1]:
            # off the plan (should not happen in a deterministic grid); replan
            self._new_waypoint(cell)
        return _action_toward(cell, self.path[self.ptr])

    def _act_continuous(self, state):
        pos, vel = state[:2], state[2:]
        while (self.ptr < len(self.path)
               and np.linalg.norm(pos - _center(self.path[self.ptr])) < self.cfg.cell_tol):
            self.ptr += 1
        if self.ptr >= len(self.path):
            if np.linalg.norm(pos - _center(self.path[-1])) < self.cfg.waypoint_tol:
                self._new_waypoint(state)
            else:
                self.ptr = len(self.path) - 1
        target = _center(self.path[min(self.ptr, len(self.path) - 1)])
        force = self.cfg.kp * (target - pos) - self.cfg.kd * vel
        return np.clip(force, -1.0, 1.0)


class RandomPolicy:
    def __init__(self, spec: MazeSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng

    def reset(self, state):
        pass

    def act(self, state):
        return random_action(self.spec, self.rng)


def generate_behavior_dataset(spec: MazeSpec, n_transitions: int,
                              rng: np.random.Generator,
                              cfg: PlannerConfig = None) -> TransitionBuffer:
    """Roll the waypoint policy until n_transitions safe transitions are logged."""
    if n_transitions <= 0:
        raise ValueError("n_transitions must be positive")
    buf = TransitionBuffer(spec.kind, layout_id=spec.layout_id)
    policy = WaypointPolicy(spec, rng, cfg)
    while len(buf) < n_transitions:
        state = sample_start(spec, rng)
        policy.reset(state)
        for _ in range(spec.episode_limit):
            action = policy.act(state)
            out = step(spec, state, action)
            if out.collided:
                break  # cut the episode; the collision is never recorded
            buf.append(Transition(s=state, a=action, r=out.reward,
                                  s_next=out.next_state, done=out.done))
            state = out.next_state
            if out.done or len(buf) >= n_transitions:
                break
        buf.end_episode()
    return buf
