"""Conservative tabular Q-learners over mixed real/imagined batches.

States are keyed exactly on grid mazes and by tile coding (floor(v / tile))
on continuous ones; continuous actions are snapped to eight unit force
directions, so both maze kinds train the same discrete Q-table.

- bcq_discrete: the bootstrap max at s' only ranges over actions whose
  empirical count share N(s',a) / max_b N(s',b) in D_total meets the
  threshold. A state with no counts at all falls back to the dataset's
  globally most frequent action (counted and logged).
- cql_discrete: plain Q-learning plus the conservative penalty gradient
  alpha * (softmax(Q(s,.)) - onehot(a)) applied to every action of the
  batch state, which pushes unseen actions below seen ones.

Terminal transitions (done=True) bootstrap zero. Greedy action selection
breaks ties by the fixed action ordering.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .buffers import MixedSampler, TransitionBuffer

log = logging.getLogger(__name__)

# eight unit forces, counterclockwise from +x, fixed ordering
DISCRETE_FORCES = np.array([
    [math.cos(k * math.pi / 4.0), math.sin(k * math.pi / 4.0)] for k in range(8)
])
DISCRETE_FORCES[np.abs(DISCRETE_FORCES) < 1e-12] = 0.0


@dataclass
class LearnerConfig:
    algo: str = "bcq_discrete"
    gamma: float = 0.99
    lr: float = 0.25
    batch_size: int = 64
    steps: int = 200_000
    bcq_threshold: float = 0.3
    cql_alpha: float = 1.0
    tile_size: float = 0.25
    q_init: float = 0.0
    eta: float = 0.1


def force_index(action) -> int:
    """Snap a continuous force to the nearest of the eight unit directions."""
    a = np.asarray(action, dtype=float).reshape(-1, 2)
    d = ((a[:, None, :] - DISCRETE_FORCES[None, :, :]) ** 2).sum(axis=2)
    idx = d.argmin(axis=1)
    return int(idx[0]) if len(idx) == 1 else idx


class QTable:
    def __init__(self, kind: str, cfg: LearnerConfig):
        self.kind = kind
        self.cfg = cfg
        self.n_actions = 4 if kind == "grid" else len(DISCRETE_FORCES)
        self._index: dict = {}
        self.table = np.zeros((0, self.n_actions))
        self.counts = np.zeros((0, self.n_actions))
        self.admissible = np.zeros((0, self.n_actions), dtype=bool)
        self.fallback_action = 0
        self.fallback_states = 0
        self.meta = {}

    def state_key(self, s):
        if self.kind == "grid":
            return (int(round(float(s[0]))), int(round(float(s[1]))))
        return tuple(int(math.floor(float(v) / self.cfg.tile_size))
                     for v in np.asarray(s, dtype=float))

    def action_index(self, a) -> int:
        return int(a) if self.kind == "grid" else force_index(a)

    def execution_action(self, idx: int):
        """Map a greedy index back to an executable env action."""
        return idx if self.kind == "grid" else DISCRETE_FORCES[idx].copy()

    def _row(self, key) -> int:
        row = self._index.get(key)
        if row is None:
            row = len(self._index)
            self._index[key] = row
            grow = max(64, self.table.shape[0])
            if row >= self.table.shape[0]:
                self.table = np.vstack([self.table, np.full((grow, self.n_actions),
                                                            self.cfg.q_init)])
                self.counts = np.vstack([self.counts,
                                         np.zeros((grow, self.n_actions))])
                self.admissible = np.vstack([self.admissible,
                                             np.zeros((grow, self.n_actions), bool)])
        return row

    def q_values(self, s) -> np.ndarray:
        row = self._index.get(self.state_key(s))
        if row is None:
            return np.full(self.n_actions, self.cfg.q_init)
        return self.table[row].copy()

    def rebuild_admissibility(self):
        """BCQ mask from counts; zero-count states point at the fallback action."""
        seen = np.array(sorted(self._index.values()), dtype=int)
        if len(seen) == 0:
            return
        rows = self.counts[seen]
        peak = rows.max(axis=1, keepdims=True)
        if self.cfg.algo == "bcq_discrete":
            with np.errstate(invalid="ignore", divide="ignore"):
                share = np.where(peak > 0, rows / np.maximum(peak, 1e-12), 0.0)
            mask = share >= self.cfg.bcq_threshold
            empty = ~mask.any(axis=1)
            mask[empty, self.fallback_action] = True
            self.fallback_states = int(empty.sum())
            if self.fallback_states:
                log.info("bcq fallback action used for %d zero-count states",
                         self.fallback_states)
        else:
            mask = np.ones_like(rows, dtype=bool)
        self.admissible[seen] = mask

    def greedy_action(self, s, admissible=None) -> int:
        """Argmax over admissible actions, first index winning ties."""
        key = self.state_key(s)
        row = self._index.get(key)
        if row is None:
            return self.fallback_action
        mask = self.admissible[row] if admissible is None else np.asarray(admissible)
        if not mask.any():
            return self.fallback_action
        q = np.where(mask, self.table[row], -np.inf)
        return int(np.argmax(q))

    def save(self, path):
        q = {}
        counts = {}
        for key, row in self._index.items():
            skey = ",".join(str(v) for v in key)
            for a in range(self.n_actions):
                q[f"{skey}|{a}"] = float(self.table[row, a])
                if self.counts[row, a]:
                    counts[f"{skey}|{a}"] = int(self.counts[row, a])
        payload = {
            "format": "romilab-qtable-v1", "kind": self.kind,
            "q": q, "counts": counts, "meta": self.meta,
            "cfg": vars(self.cfg), "fallback_action": self.fallback_action,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "QTable":
        with open(path) as fh:
            payload = json.load(fh)
        if payload.get("format") != "romilab-qtable-v1":
            raise ValueError(f"{path} is not a qtable checkpoint")
        cfg = LearnerConfig(**payload["cfg"])
        qt = cls(payload["kind"], cfg)
        for flat, val in payload["q"].items():
            skey, a = flat.rsplit("|", 1)
            row = qt._row(tuple(int(v) for v in skey.split(",")))
            qt.table[row, int(a)] = val
        for flat, val in payload["counts"].items():
            skey, a = flat.rsplit("|", 1)
            row = qt._row(tuple(int(v) for v in skey.split(",")))
            qt.counts[row, int(a)] = val
        qt.meta = payload["meta"]
        qt.fallback_action = int(payload["fallback_action"])
        qt.rebuild_admissibility()
        return qt


def _encode(buf: TransitionBuffer, qt: QTable):
    n = len(buf)
    s_rows = np.zeros(n, dtype=int)
    sn_rows = np.zeros(n, dtype=int)
    a_idx = np.zeros(n, dtype=int)
    for i, t in enumerate(buf.transitions):
        s_rows[i] = qt._row(qt.state_key(t.s))
        sn_rows[i] = qt._row(qt.state_key(t.s_next))
        a_idx[i] = qt.action_index(t.a)
    return s_rows, a_idx, buf.rewards().astype(float), sn_rows, buf.dones().astype(float)


def train_policy(sampler: MixedSampler, cfg: LearnerConfig,
                 rng: np.random.Generator) -> QTable:
    """Fitted-Q over eta-mixed batches from the sampler's two buffers."""
    if cfg.algo not in ("bcq_discrete", "cql_discrete"):
        raise ValueError(f"unknown learner algo {cfg.algo!r}")
    qt = QTable(sampler.env_buffer.kind, cfg)
    enc_env = _encode(sampler.env_buffer, qt)
    enc_model = (_encode(sampler.model_buffer, qt)
                 if sampler.model_buffer is not None and len(sampler.model_buffer)
                 else None)
    for enc in (enc_env, enc_model) if enc_model else (enc_env,):
        np.add.at(qt.counts, (enc[0], enc[1]), 1.0)
    totals = qt.counts.sum(axis=0)
    qt.fallback_action = int(np.argmax(totals))
    qt.rebuild_admissibility()

    gamma, lr, alpha = cfg.gamma, cfg.lr, cfg.cql_alpha
    cql = cfg.algo == "cql_discrete"
    for _ in range(cfg.steps):
        env_i, model_i = sampler.sample_indices()
        parts = [np.asarray(col)[env_i] for col in enc_env]
        if enc_model is not None and len(model_i):
            parts = [np.concatenate([p, np.asarray(col)[model_i]])
                     for p, col in zip(parts, enc_model)]
        s_rows, a_idx, r, sn_rows, done = parts
        qn = qt.table[sn_rows]
        masked = np.where(qt.admissible[sn_rows], qn, -np.inf)
        boot = masked.max(axis=1)
        boot[~np.isfinite(boot)] = 0.0
        target = r + gamma * (1.0 - done) * boot
        td = target - qt.table[s_rows, a_idx]
        # Average the TD errors of duplicate (s, a) pairs within a batch so
        # the per-pair step size stays lr regardless of batch composition.
        flat = s_rows * qt.n_actions + a_idx
        uniq, inv = np.unique(flat, return_inverse=True)
        sums = np.bincount(inv, weights=td)
        qt.table.flat[uniq] += lr * sums / np.bincount(inv)
        if cql:
            q = qt.table[s_rows]
            z = np.exp(q - q.max(axis=1, keepdims=True))
            p = z / z.sum(axis=1, keepdims=True)
            p[np.arange(len(s_rows)), a_idx] -= 1.0
            uniq_s, inv_s = np.unique(s_rows, return_inverse=True)
            pen = np.zeros((len(uniq_s), qt.n_actions))
            np.add.at(pen, inv_s, p)
            qt.table[uniq_s] -= lr * alpha * pen / np.bincount(inv_s)[:, None]
    qt.meta = {
        "algo": cfg.algo, "gamma": gamma, "lr": lr, "steps": cfg.steps,
        "eta": sampler.eta, "batch_size": sampler.batch_size,
        "bcq_threshold": cfg.bcq_threshold, "cql_alpha": alpha,
        "fallback_states": qt.fallback_states,
        "n_env": len(sampler.env_buffer),
        "n_model": len(sampler.model_buffer) if sampler.model_buffer is not None else 0,
    }
    return qt


def greedy_action(qt: QTable, s, admissible=None) -> int:
    return qt.greedy_action(s, admissible)
