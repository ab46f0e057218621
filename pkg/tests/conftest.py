"""Shared fixtures for the test suite."""

import numpy as np
import pytest

from romilab.buffers import Transition, TransitionBuffer
from romilab.mazes import make_maze


@pytest.fixture
def umaze_grid():
    return make_maze("umaze", kind="grid")


@pytest.fixture
def umaze_continuous():
    return make_maze("umaze", kind="continuous")


@pytest.fixture
def chain_buffer():
    """Deterministic three-state chain s0 -> s1 -> s2 via action RIGHT (3)."""
    s0, s1, s2 = (1, 1), (1, 2), (1, 3)
    buf = TransitionBuffer("grid", layout_id="chain")
    for _ in range(20):
        buf.append(Transition(s=s0, a=3, r=0.0, s_next=s1))
        buf.append(Transition(s=s1, a=3, r=1.0, s_next=s2, done=True))
        buf.end_episode()
    return buf


@pytest.fixture
def rng():
    return np.random.default_rng(0)
