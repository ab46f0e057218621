"""Transition buffers and the batch plumbing around them.

A TransitionBuffer is an ordered list of transitions plus episode boundaries.
Grid states are (row, col) tuples and actions are move indices; continuous
states are float vectors [x, y, vx, vy] with force actions [fx, fy]. Either
way the buffer exposes stacked float arrays for vector math and a flat binary
serialization (JSON header + little-endian float32 payload, see blobio).

MixedSampler draws batches with an exact env/model composition: a batch of
size B contains round(eta * B) model transitions (arithmetic rounding) and the
rest from the environment buffer, uniformly with replacement, in shuffled
order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .blobio import read_blob, write_blob

STD_FLOOR = 1e-6


@dataclass
class Transition:
    s: object
    a: object
    r: float
    s_next: object
    done: bool = False
    collided: bool = False
    origin: str = "env"


class TransitionBuffer:
    def __init__(self, kind: str, layout_id: str = "", seed=None):
        if kind not in ("grid", "continuous"):
            raise ValueError(f"unknown buffer kind {kind!r}")
        self.kind = kind
        self.layout_id = layout_id
        self.seed = seed
        self.transitions: list[Transition] = []
        self.episode_bounds: list[tuple[int, int]] = []
        self._open_episode_start = None
        self._cache = {}

    def __len__(self):
        return len(self.transitions)

    def __getitem__(self, i):
        return self.transitions[i]

    def __iter__(self):
        return iter(self.transitions)

    @property
    def state_dim(self):
        return 2 if self.kind == "grid" else 4

    @property
    def action_dim(self):
        return 1 if self.kind == "grid" else 2

    def append(self, tr: Transition):
        if self._open_episode_start is None:
            self._open_episode_start = len(self.transitions)
        self.transitions.append(tr)
        self._cache.clear()

    def end_episode(self):
        if self._open_episode_start is not None:
            self.episode_bounds.append((self._open_episode_start, len(self.transitions)))
            self._open_episode_start = None

    def _closed(self):
        """Episode bounds with any still-open tail episode included."""
        bounds = list(self.episode_bounds)
        if self._open_episode_start is not None:
            bounds.append((self._open_episode_start, len(self.transitions)))
        return bounds

    def _stack(self, key, fn, dtype=float):
        if key not in self._cache:
            self._cache[key] = np.array([fn(t) for t in self.transitions], dtype=dtype)
        return self._cache[key]

    def states(self):
        return self._stack("s", lambda t: np.atleast_1d(np.asarray(t.s, dtype=float)))

    def next_states(self):
        return self._stack("sn", lambda t: np.atleast_1d(np.asarray(t.s_next, dtype=float)))

    def actions(self):
        return self._stack("a", lambda t: np.atleast_1d(np.asarray(t.a, dtype=float)))

    def rewards(self):
        return self._stack("r", lambda t: t.r)

    def dones(self):
        return self._stack("done", lambda t: t.done, dtype=bool)

    def collideds(self):
        return self._stack("coll", lambda t: t.collided, dtype=bool)

    def origins(self):
        return self._stack("orig", lambda t: 0.0 if t.origin == "env" else 1.0)

    def episode_returns(self):
        r = self.rewards() if len(self) else np.zeros(0)
        return np.array([r[a:b].sum() for a, b in self._closed()])

    def state_key_set(self):
        """All states (s and s_next fields) as hashable keys; grid only."""
        if self.kind != "grid":
            raise ValueError("state_key_set is defined for grid buffers")
        keys = set()
        for t in self.transitions:
            keys.add((int(t.s[0]), int(t.s[1])))
            keys.add((int(t.s_next[0]), int(t.s_next[1])))
        return keys

    def subset(self, indices):
        """New buffer with the selected transitions, one episode apiece."""
        out = TransitionBuffer(self.kind, self.layout_id, self.seed)
        for i in indices:
            out.append(self.transitions[int(i)])
            out.end_episode()
        return out

    def extend(self, other: "TransitionBuffer"):
        if other.kind != self.kind:
            raise ValueError("cannot mix buffer kinds")
        for a, b in other._closed():
            for t in other.transitions[a:b]:
                self.append(t)
            self.end_episode()


def split_holdout(buf: TransitionBuffer, n_holdout: int, rng: np.random.Generator):
    """Disjoint (train, holdout) split; together they hold every transition.

    n_holdout = 0 returns (a full copy, an empty buffer).
    """
    if not 0 <= n_holdout < len(buf):
        raise ValueError(f"holdout size {n_holdout} not in [0, {len(buf)})")
    perm = rng.permutation(len(buf))
    return buf.subset(perm[n_holdout:]), buf.subset(perm[:n_holdout])


@dataclass
class NormStats:
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    reward_mean: float
    reward_std: float

    def norm_states(self, x):
        return (np.asarray(x, dtype=float) - self.state_mean) / self.state_std

    def norm_actions(self, a):
        return (np.asarray(a, dtype=float) - self.action_mean) / self.action_std

    def to_dict(self):
        return {
            "state_mean": self.state_mean.tolist(),
            "state_std": self.state_std.tolist(),
            "action_mean": self.action_mean.tolist(),
            "action_std": self.action_std.tolist(),
            "reward_mean": self.reward_mean,
            "reward_std": self.reward_std,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["state_mean"]), np.array(d["state_std"]),
                   np.array(d["action_mean"]), np.array(d["action_std"]),
                   float(d["reward_mean"]), float(d["reward_std"]))


def _floored_std(x, axis=0):
    return np.maximum(np.std(x, axis=axis), STD_FLOOR)  # population convention


def compute_norm_stats(buf: TransitionBuffer) -> NormStats:
    if len(buf) < 2:
        raise ValueError("stats need at least two transitions")
    s, a, r = buf.states(), buf.actions(), buf.rewards()
    return NormStats(
        state_mean=s.mean(axis=0), state_std=_floored_std(s),
        action_mean=a.mean(axis=0), action_std=_floored_std(a),
        reward_mean=float(r.mean()), reward_std=float(max(r.std(), STD_FLOOR)),
    )


def exact_model_count(eta: float, batch_size: int) -> int:
    """Model transitions per batch: arithmetic rounding of eta * B."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    return int(math.floor(eta * batch_size + 0.5))


class MixedSampler:
    """Uniform-with-replacement batches with an exact env/model split."""

    def __init__(self, env_buffer: TransitionBuffer, model_buffer, eta: float,
                 batch_size: int, rng: np.random.Generator):
        self.env_buffer = env_buffer
        self.model_buffer = model_buffer
        self.eta = float(eta)
        self.batch_size = int(batch_size)
        self.rng = rng
        self.n_model = exact_model_count(self.eta, self.batch_size)
        self.n_env = self.batch_size - self.n_model
        if self.n_env > 0 and len(env_buffer) == 0:
            raise ValueError("env share is nonzero but the env buffer is empty")
        if self.n_model > 0 and (model_buffer is None or len(model_buffer) == 0):
            raise ValueError("eta > 0 but the model buffer is empty")

    def sample_indices(self):
        """(env_idx, model_idx) index arrays for one batch."""
        env_idx = (self.rng.integers(len(self.env_buffer), size=self.n_env)
                   if self.n_env else np.zeros(0, dtype=int))
        model_idx = (self.rng.integers(len(self.model_buffer), size=self.n_model)
                     if self.n_model else np.zeros(0, dtype=int))
        return env_idx, model_idx

    def sample(self) -> list[Transition]:
        env_idx, model_idx = self.sample_indices()
        batch = [self.env_buffer[i] for i in env_idx]
        batch += [self.model_buffer[i] for i in model_idx]
        order = self.rng.permutation(len(batch))
        return [batch[i] for i in order]


def sample_mixed_batch(sampler: MixedSampler) -> list[Transition]:
    return sampler.sample()


def priority_weights(buf: TransitionBuffer, mode: str = "uniform",
                     temperature: float = 1.0) -> np.ndarray:
    """Per-transition anchor weights, normalized to sum to one.

    "return_weighted" softmaxes episode returns at the given temperature and
    broadcasts each episode's weight to its transitions.
    """
    n = len(buf)
    if n == 0:
        raise ValueError("empty buffer has no weights")
    if mode == "uniform":
        return np.full(n, 1.0 / n)
    if mode != "return_weighted":
        raise ValueError(f"unknown priority mode {mode!r}")
    bounds = buf._closed()
    returns = buf.episode_returns() / float(temperature)
    z = np.exp(returns - returns.max())
    ep_w = z / z.sum()
    w = np.zeros(n)
    for (a, b), ww in zip(bounds, ep_w):
        w[a:b] = ww
    total = w.sum()
    if total <= 0:
        raise ValueError("degenerate priority weights")
    return w / total


BUFFER_FORMAT = "romilab-buffer-v1"


def save_buffer(buf: TransitionBuffer, path) -> None:
    header = {
        "format": BUFFER_FORMAT,
        "kind": buf.kind,
        "layout_id": buf.layout_id,
        "seed": buf.seed,
        "count": len(buf),
        "state_dim": buf.state_dim,
        "action_dim": buf.action_dim,
        "episode_bounds": [list(b) for b in buf._closed()],
    }
    if len(buf):
        arrays = [buf.states(), buf.actions(), buf.rewards(),
                  buf.next_states(), buf.dones().astype(float),
                  buf.collideds().astype(float), buf.origins()]
    else:
        arrays = [np.zeros((0, buf.state_dim)), np.zeros((0, buf.action_dim)),
                  np.zeros(0), np.zeros((0, buf.state_dim)), np.zeros(0),
                  np.zeros(0), np.zeros(0)]
    write_blob(path, header, arrays)


def load_buffer(path) -> TransitionBuffer:
    header, arrays = read_blob(path)
    if header.get("format") != BUFFER_FORMAT:
        raise ValueError(f"{path} is not a {BUFFER_FORMAT} file")
    s, a, r, sn, done, coll, orig = arrays
    buf = TransitionBuffer(header["kind"], header["layout_id"], header["seed"])
    grid = buf.kind == "grid"
    for i in range(header["count"]):
        if grid:
            si = (int(round(float(s[i][0]))), int(round(float(s[i][1]))))
            sni = (int(round(float(sn[i][0]))), int(round(float(sn[i][1]))))
            ai = int(round(float(a[i][0])))
        else:
            si, sni, ai = s[i].astype(float), sn[i].astype(float), a[i].astype(float)
        buf.transitions.append(Transition(
            s=si, a=ai, r=float(r[i]), s_next=sni, done=bool(done[i] > 0.5),
            collided=bool(coll[i] > 0.5), origin="env" if orig[i] < 0.5 else "model"))
    buf.episode_bounds = [tuple(b) for b in header["episode_bounds"]]
    return buf


def export_csv(buf: TransitionBuffer, path) -> None:
    ds, da = buf.state_dim, buf.action_dim
    cols = ([f"s_{i}" for i in range(ds)] + [f"a_{i}" for i in range(da)]
            + ["r"] + [f"sn_{i}" for i in range(ds)]
            + ["done", "collided", "origin", "episode"])
    ep_of = np.zeros(len(buf), dtype=int)
    for e, (a, b) in enumerate(buf._closed()):
        ep_of[a:b] = e
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i, t in enumerate(buf.transitions):
            row = (list(np.atleast_1d(np.asarray(t.s, dtype=float)))
                   + list(np.atleast_1d(np.asarray(t.a, dtype=float)))
                   + [t.r]
                   + list(np.atleast_1d(np.asarray(t.s_next, dtype=float)))
                   + [int(t.done), int(t.collided), t.origin, int(ep_of[i])])
            w.writerow(row)
