"""Waypoint behavior policy and dataset generation."""

import numpy as np
import pytest

from romilab.behavior import (WaypointPolicy, bfs_path,
                              generate_behavior_dataset)
from romilab.mazes import GRID_DELTAS, make_maze, step

from helpers import write_layout


class TestBfsPath:
    def test_trivial_and_straight_line(self, umaze_grid):
        walls = umaze_grid.walls
        assert bfs_path(walls, (1, 1), (1, 1)) == [(1, 1)]
        path = bfs_path(walls, (1, 1), (1, 4))
        assert path[0] == (1, 1) and path[-1] == (1, 4)
        assert len(path) == 4

    def test_steps_are_adjacent_and_wall_free(self, umaze_grid):
        path = bfs_path(umaze_grid.walls, (1, 1), (4, 1))
        for cur, nxt in zip(path, path[1:]):
            assert (nxt[0] - cur[0], nxt[1] - cur[1]) in GRID_DELTAS
            assert not umaze_grid.walls[nxt]

    def test_shortest_length_around_a_wall(self, tmp_path):
        spec = make_maze(write_layout(
            tmp_path, ("#####", "#..G#", "#.#.#", "#...#", "#####")))
        path = bfs_path(spec.walls, (3, 1), (1, 3))
        assert len(path) == 5  # four moves around the center block

    def test_unreachable_raises(self):
        walls = np.array([[1, 1, 1, 1, 1],
                          [1, 0, 1, 0, 1],
                          [1, 1, 1, 1, 1]], dtype=bool)
        with pytest.raises(ValueError, match="no path"):
            bfs_path(walls, (1, 1), (1, 3))


class TestWaypointPolicy:
    def test_grid_actions_follow_plan(self, umaze_grid):
        rng = np.random.default_rng(1)
        pol = WaypointPolicy(umaze_grid, rng)
        state = (1, 1)
        pol.reset(state)
        for _ in range(100):
            out = step(umaze_grid, state, pol.act(state))
            assert not out.collided, "planner walked into a wall"
            state = out.next_state

    def test_continuous_control_avoids_walls(self, umaze_continuous):
        rng = np.random.default_rng(2)
        pol = WaypointPolicy(umaze_continuous, rng)
        state = np.array([1.5, 1.5, 0.0, 0.0])
        pol.reset(state)
        for _ in range(200):
            a = pol.act(state)
            assert np.all(np.abs(a) <= 1.0)
            out = step(umaze_continuous, state, a)
            assert not out.collided
            state = out.next_state


class TestGenerateBehaviorDataset:
    def test_requested_count_and_no_collisions(self, umaze_grid):
        buf = generate_behavior_dataset(umaze_grid, 500,
                                        np.random.default_rng(0))
        assert len(buf) == 500
        assert buf.kind == "grid"
        assert not buf.collideds().any()
        # every logged transition obeys the grid dynamics
        for t in buf:
            out = step(umaze_grid, t.s, t.a)
            assert tuple(out.next_state) == tuple(t.s_next)
            assert out.reward == t.r

    def test_continuous_dataset_states_in_bounds(self, umaze_continuous):
        buf = generate_behavior_dataset(umaze_continuous, 300,
                                        np.random.default_rng(1))
        states = buf.states()
        assert states.shape == (300, 4)
        R, C = umaze_continuous.shape
        assert (states[:, 0] >= 0).all() and (states[:, 0] <= C).all()
        assert (states[:, 1] >= 0).all() and (states[:, 1] <= R).all()

    def test_non_positive_count_rejected(self, umaze_grid):
        with pytest.raises(ValueError):
            generate_behavior_dataset(umaze_grid, 0, np.random.default_rng(0))

    def test_same_seed_reproduces(self, umaze_grid):
        a = generate_behavior_dataset(umaze_grid, 200, np.random.default_rng(5))
        b = generate_behavior_dataset(umaze_grid, 200, np.random.default_rng(5))
        assert np.array_equal(a.states(), b.states())
        assert np.array_equal(a.actions(), b.actions())
