"""Shared test utilities: finite-difference gradients and buffer builders."""

from __future__ import annotations

import numpy as np

from romilab.buffers import Transition, TransitionBuffer
from romilab.nets import flat_params, flat_grads, set_flat_params

FD_H = 1e-5


def analytic_flat_grad(nets, loss_fn) -> np.ndarray:
    """Zero, run the loss once, and return the accumulated flat gradient."""
    for net in nets:
        net.zero_grads()
    loss_fn()
    return flat_grads(nets)


def fd_flat_grad(nets, loss_fn, h: float = FD_H) -> np.ndarray:
    """Central finite differences of loss_fn() over the nets' flat params."""
    base = flat_params(nets)
    grad = np.zeros_like(base)
    for i in range(len(base)):
        vec = base.copy()
        vec[i] = base[i] + h
        set_flat_params(nets, vec)
        up = loss_fn()
        vec[i] = base[i] - h
        set_flat_params(nets, vec)
        down = loss_fn()
        grad[i] = (up - down) / (2.0 * h)
    set_flat_params(nets, base)
    return grad


def max_rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - fd) / (np.abs(analytic) + 1e-8)))


def write_layout(tmp_path, rows, name="layout.txt") -> str:
    """Write ASCII rows to a file and return its path for make_maze."""
    path = tmp_path / name
    path.write_text("\n".join(rows) + "\n")
    return str(path)


def grid_buffer(rows, layout_id="test") -> TransitionBuffer:
    """Buffer from (s, a, r, s_next[, done]) tuples, one episode per row group.

    rows is a list of episodes; each episode is a list of tuples.
    """
    buf = TransitionBuffer("grid", layout_id=layout_id)
    for episode in rows:
        for item in episode:
            s, a, r, sn = item[:4]
            done = bool(item[4]) if len(item) > 4 else False
            buf.append(Transition(s=tuple(s), a=int(a), r=float(r),
                                  s_next=tuple(sn), done=done))
        buf.end_episode()
    return buf


def random_grid_buffer(rng, max_transitions=50, n_states=5,
                       n_actions=4) -> TransitionBuffer:
    """Random small grid buffer with float32-exact rewards."""
    n = int(rng.integers(1, max_transitions + 1))
    buf = TransitionBuffer("grid", layout_id="rand")
    for _ in range(n):
        s = (int(rng.integers(n_states)), int(rng.integers(2)))
        sn = (int(rng.integers(n_states)), int(rng.integers(2)))
        buf.append(Transition(s=s, a=int(rng.integers(n_actions)),
                              r=float(rng.integers(0, 5)) / 4.0, s_next=sn))
        if rng.random() < 0.25:
            buf.end_episode()
    buf.end_episode()
    return buf


def continuous_buffer(rng, n=64, layout_id="cont") -> TransitionBuffer:
    """Random continuous buffer with bounded actions and smooth motion."""
    buf = TransitionBuffer("continuous", layout_id=layout_id)
    s = rng.uniform(0.5, 3.5, size=4)
    for _ in range(n):
        a = rng.uniform(-1.0, 1.0, size=2)
        sn = s + 0.1 * np.concatenate([s[2:], a])
        buf.append(Transition(s=s.copy(), a=a.copy(), r=float(rng.random()),
                              s_next=sn.copy()))
        s = sn
        if rng.random() < 0.1:
            buf.end_episode()
            s = rng.uniform(0.5, 3.5, size=4)
    buf.end_episode()
    return buf
