"""Rollout policies and the imagination engine.

A rollout policy proposes actions conditioned on the state the model is being
queried at. For reverse rollouts that state is a successor (which action could
have led here?); for forward rollouts it is the current state. Four kinds:

- uniform: uniform over the action space.
- empirical: uniform over actions of dataset transitions whose conditioning
  state matches (exact match on grids, k-nearest-neighbor on continuous
  states); unmatched states fall back to a uniform draw.
- cvae: conditional VAE trained with squared-error reconstruction plus a
  KL(q(z|cond, a) || N(0, I)) penalty; sampling clips the latent draw.
- rbc: a Gaussian behavior-cloning net trained by negative log likelihood.

imagine() launches rollouts anchored at buffer states: reverse rollouts start
from a transition's s_next and walk backward (so the trajectory, read in
forward time, ends at a dataset state); forward rollouts start from a
transition's s field. Rollouts truncate on a model no-data signal or when a
predicted state leaves the maze bounding box. Done flags come from the known
goal-region termination test of the maze spec (always False when the task
does not terminate at the goal); collided is never set on imagined data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .buffers import Transition, TransitionBuffer
from .mazes import MazeSpec, in_goal, state_in_bounds
from .models import _Norm, _stats
from .nets import Adam, GaussianHead, Mlp, gaussian_nll_loss

POLICY_KINDS = ("uniform", "empirical", "cvae", "rbc")


class UniformPolicy:
    kind = "uniform"

    def __init__(self, buffer_kind: str, n_actions: int = 4):
        self.buffer_kind = buffer_kind
        self.n_actions = n_actions

    def sample_batch(self, cond, rng: np.random.Generator):
        n = len(cond)
        if self.buffer_kind == "grid":
            return rng.integers(self.n_actions, size=n)
        return rng.uniform(-1.0, 1.0, size=(n, 2))


class EmpiricalPolicy:
    kind = "empirical"

    def __init__(self, buffer: TransitionBuffer, cond_field: str = "s_next",
                 k_neighbors: int = 10):
        self.buffer_kind = buffer.kind
        self.k = k_neighbors
        cond = buffer.next_states() if cond_field == "s_next" else buffer.states()
        self._actions = buffer.actions()
        if self.buffer_kind == "grid":
            self._table = {}
            for row, a in zip(cond, self._actions):
                key = (int(row[0]), int(row[1]))
                self._table.setdefault(key, []).append(int(a[0]))
            self._table = {k: np.array(v) for k, v in self._table.items()}
            self.n_actions = 4
        else:
            self._tree = cKDTree(cond)

    def sample_batch(self, cond, rng: np.random.Generator):
        n = len(cond)
        if self.buffer_kind == "grid":
            out = np.zeros(n, dtype=int)
            for i in range(n):
                key = (int(round(float(cond[i][0]))), int(round(float(cond[i][1]))))
                acts = self._table.get(key)
                if acts is None:
                    out[i] = rng.integers(self.n_actions)
                else:
                    out[i] = acts[rng.integers(len(acts))]
            return out
        k = min(self.k, self._tree.n)
        _, idx = self._tree.query(np.asarray(cond, dtype=float), k=k)
        idx = np.atleast_2d(idx)
        pick = rng.integers(k, size=n)
        return self._actions[idx[np.arange(n), pick]]


class CvaePolicy:
    kind = "cvae"

    def __init__(self, encoder: Mlp, decoder: Mlp, latent_dim: int,
                 latent_clip: float, cond_norm: _Norm):
        self.encoder = encoder
        self.decoder = decoder
        self.latent_dim = latent_dim
        self.latent_clip = latent_clip
        self.cond_norm = cond_norm

    def sample_batch(self, cond, rng: np.random.Generator):
        n = len(cond)
        z = np.clip(rng.standard_normal((n, self.latent_dim)),
                    -self.latent_clip, self.latent_clip)
        x = np.concatenate([self.cond_norm.fwd(np.asarray(cond, dtype=float)), z], axis=1)
        return np.clip(self.decoder.forward(x), -1.0, 1.0)


class RbcPolicy:
    kind = "rbc"

    def __init__(self, net: Mlp, cond_norm: _Norm):
        self.net = net
        self.cond_norm = cond_norm

    def sample_batch(self, cond, rng: np.random.Generator):
        raw = self.net.forward(self.cond_norm.fwd(np.asarray(cond, dtype=float)))
        head = GaussianHead(raw)
        a, _ = head.sample(rng)
        return np.clip(a, -1.0, 1.0)


def sample_action(policy, s_cond, rng: np.random.Generator):
    """Single-state convenience wrapper around sample_batch."""
    batch = policy.sample_batch(np.atleast_2d(np.asarray(s_cond, dtype=float)), rng)
    return batch[0]


# -- policy training ---------------------------------------------------------


@dataclass
class CvaeConfig:
    latent_dim: int = 0          # 0 -> 2 * action_dim
    latent_clip: float = 0.5
    hidden: tuple = (128, 128)
    activation: str = "relu"
    lr: float = 1e-3
    batch_size: int = 256
    steps: int = 3000
    cond_field: str = "s_next"


@dataclass
class RbcConfig:
    hidden: tuple = (128, 128)
    activation: str = "relu"
    lr: float = 1e-3
    batch_size: int = 256
    steps: int = 3000
    cond_field: str = "s_next"


def cvae_loss(encoder: Mlp, decoder: Mlp, cond, actions, eps) -> float:
    """Reconstruction + KL loss; accumulates grads into both nets.

    cond is the (already normalized) conditioning batch, actions the targets,
    eps the fixed standard-normal draw for the reparameterized latent.
    """
    cond = np.atleast_2d(cond)
    actions = np.atleast_2d(actions)
    n = len(cond)
    head = GaussianHead(encoder.forward(np.concatenate([cond, actions], axis=1)))
    sigma = head.sigma
    z = head.mu + sigma * eps
    recon = decoder.forward(np.concatenate([cond, z], axis=1))
    sq = (actions - recon) ** 2
    kl = 0.5 * (head.mu ** 2 + sigma ** 2 - 1.0) - head.log_sigma
    loss = float(sq.sum(axis=1).mean() + kl.sum(axis=1).mean())

    d_recon = 2.0 * (recon - actions) / n
    d_dec_in = decoder.backward(d_recon)
    d_z = d_dec_in[:, cond.shape[1]:]
    d_mu = d_z + head.mu / n
    d_ls = d_z * sigma * eps + (sigma ** 2 - 1.0) / n
    encoder.backward(head.raw_grad(d_mu, d_ls))
    return loss


def rbc_loss(net: Mlp, cond, actions) -> float:
    """Mean action NLL under the Gaussian policy head; accumulates grads."""
    return gaussian_nll_loss(net, cond, actions)


def train_cvae_policy(train: TransitionBuffer, cfg: CvaeConfig,
                      rng: np.random.Generator) -> CvaePolicy:
    if train.kind != "continuous":
        raise ValueError("cvae rollout policies need continuous actions")
    cond = train.next_states() if cfg.cond_field == "s_next" else train.states()
    actions = train.actions()
    norm = _stats(cond)
    cond_n = norm.fwd(cond)
    d_a = actions.shape[1]
    d_z = cfg.latent_dim or 2 * d_a
    enc = Mlp([cond.shape[1] + d_a] + list(cfg.hidden) + [2 * d_z],
              [cfg.activation] * len(cfg.hidden) + ["linear"], rng)
    dec = Mlp([cond.shape[1] + d_z] + list(cfg.hidden) + [d_a],
              [cfg.activation] * len(cfg.hidden) + ["linear"], rng)
    opt = Adam(enc.params() + dec.params(), lr=cfg.lr)
    for _ in range(cfg.steps):
        sel = rng.integers(len(cond_n), size=cfg.batch_size)
        eps = rng.standard_normal((len(sel), d_z))
        enc.zero_grads()
        dec.zero_grads()
        cvae_loss(enc, dec, cond_n[sel], actions[sel], eps)
        opt.step(enc.grads() + dec.grads())
    return CvaePolicy(enc, dec, d_z, cfg.latent_clip, norm)


def train_rbc_policy(train: TransitionBuffer, cfg: RbcConfig,
                     rng: np.random.Generator) -> RbcPolicy:
    if train.kind != "continuous":
        raise ValueError("rbc rollout policies need continuous actions")
    cond = train.next_states() if cfg.cond_field == "s_next" else train.states()
    actions = train.actions()
    norm = _stats(cond)
    cond_n = norm.fwd(cond)
    net = Mlp([cond.shape[1]] + list(cfg.hidden) + [2 * actions.shape[1]],
              [cfg.activation] * len(cfg.hidden) + ["linear"], rng)
    opt = Adam(net.params(), lr=cfg.lr)
    for _ in range(cfg.steps):
        sel = rng.integers(len(cond_n), size=cfg.batch_size)
        net.zero_grads()
        rbc_loss(net, cond_n[sel], actions[sel])
        opt.step(net.grads())
    return RbcPolicy(net, norm)


def make_rollout_policy(kind: str, buffer: TransitionBuffer, direction: str,
                        rng: np.random.Generator, cvae_cfg=None, rbc_cfg=None):
    """Build (training if needed) the rollout policy for one direction."""
    cond_field = "s_next" if direction == "reverse" else "s"
    if kind == "uniform":
        return UniformPolicy(buffer.kind)
    if kind == "empirical":
        return EmpiricalPolicy(buffer, cond_field=cond_field)
    if kind == "cvae":
        cfg = cvae_cfg or CvaeConfig()
        cfg.cond_field = cond_field
        return train_cvae_policy(buffer, cfg, rng)
    if kind == "rbc":
        cfg = rbc_cfg or RbcConfig()
        cfg.cond_field = cond_field
        return train_rbc_policy(buffer, cfg, rng)
    raise ValueError(f"unknown rollout policy kind {kind!r}")


# -- the imagination engine ---------------------------------------------------


@dataclass
class ImaginationConfig:
    direction: str = "reverse"     # "reverse" | "forward"
    horizon: int = 5
    n_rollouts: int = 0            # 0 -> one rollout per anchor-buffer transition
    start_mode: str = "uniform"    # anchor weighting: "uniform" | "return_weighted"


@dataclass
class ImaginedTrajectory:
    anchor: object                 # the dataset state the rollout was launched from
    transitions: list


@dataclass
class RolloutReport:
    direction: str
    policy: str
    horizon: int
    n_rollouts: int
    n_transitions: int
    n_truncated_no_data: int
    n_truncated_bounds: int
    mean_length: float

    def to_dict(self):
        return dict(vars(self))


def _as_state(kind, row):
    if kind == "grid":
        return (int(round(float(row[0]))), int(round(float(row[1]))))
    return np.asarray(row, dtype=float).copy()


def _as_action(kind, a):
    return int(a) if kind == "grid" else np.asarray(a, dtype=float).copy()


def imagine(model, policy, anchors: TransitionBuffer, cfg: ImaginationConfig,
            rng: np.random.Generator, weights=None, spec: MazeSpec = None):
    """Run anchored rollouts; returns (list of ImaginedTrajectory, RolloutReport).

    Reverse rollouts emit (pred, a, r, cur) then move to pred; forward
    rollouts emit (cur, a, r, succ) then move to succ. Every emitted
    trajectory therefore touches its anchor: reverse chains end at it in
    forward time, forward chains start at it.
    """
    if cfg.direction not in ("reverse", "forward"):
        raise ValueError(f"unknown rollout direction {cfg.direction!r}")
    if cfg.horizon < 1:
        raise ValueError("horizon must be >= 1")
    if len(anchors) == 0:
        raise ValueError("anchor buffer is empty")
    kind = anchors.kind
    n = cfg.n_rollouts or len(anchors)
    idx = rng.choice(len(anchors), size=n, p=weights)
    anchor_states = (anchors.next_states() if cfg.direction == "reverse"
                     else anchors.states())[idx]

    trajectories = [ImaginedTrajectory(_as_state(kind, anchor_states[i]), [])
                    for i in range(n)]
    cur = anchor_states.astype(float).copy()
    alive = np.ones(n, dtype=bool)
    trunc_data = trunc_bounds = 0

    for _ in range(cfg.horizon):
        rows = np.where(alive)[0]
        if len(rows) == 0:
            break
        actions = policy.sample_batch(cur[rows], rng)
        outs, rewards, valid = model.predict_batch(cur[rows], actions, rng)
        for j, i in enumerate(rows):
            if not valid[j]:
                alive[i] = False
                trunc_data += 1
                continue
            if spec is not None and not state_in_bounds(spec, outs[j]):
                alive[i] = False
                trunc_bounds += 1
                continue
            out_state = _as_state(kind, outs[j])
            cur_state = _as_state(kind, cur[i])
            action = _as_action(kind, actions[j])
            if cfg.direction == "reverse":
                s, s_next = out_state, cur_state
            else:
                s, s_next = cur_state, out_state
            done = bool(spec is not None and spec.goal_terminal
                        and in_goal(spec, s_next))
            trajectories[i].transitions.append(Transition(
                s=s, a=action, r=float(rewards[j]), s_next=s_next,
                done=done, collided=False, origin="model"))
            cur[i] = outs[j]
            if done and cfg.direction == "forward":
                alive[i] = False
    n_tr = sum(len(t.transitions) for t in trajectories)
    report = RolloutReport(
        direction=cfg.direction, policy=policy.kind, horizon=cfg.horizon,
        n_rollouts=n, n_transitions=n_tr, n_truncated_no_data=trunc_data,
        n_truncated_bounds=trunc_bounds, mean_length=n_tr / n)
    return trajectories, report


def trajectories_to_buffer(trajectories, kind: str,
                           layout_id: str = "") -> TransitionBuffer:
    """Pack imagined trajectories into a buffer, one episode per rollout."""
    buf = TransitionBuffer(kind, layout_id=layout_id)
    for traj in trajectories:
        for t in traj.transitions:
            buf.append(t)
        buf.end_episode()
    return buf
