"""Dynamics models over transition buffers, in both time directions.

A reverse model predicts the predecessor state (and the transition's reward)
from (s_next, action); a forward model predicts the successor from (s, action).
Fitting a forward model is exactly fitting a reverse model on the
time-reversed buffer, and the code paths are shared.

Two families:

- TabularModel (grid mazes): maximum-likelihood categorical counts with
  optional Laplace smoothing over the observed state support. With
  eps_lap == 0 a query on a never-observed (cond, action) pair raises
  NoDataError, which callers must treat as a hard stop. Rewards are keyed on
  the transition's own (s, a) pair and estimated by their observed mean.

- GaussianEnsemble: n_members diagonal-Gaussian MLPs trained on normalized
  inputs to predict the normalized (state_delta, reward) target, where
  state_delta = predicted_state - conditioning_state. The n_elites members
  with the best holdout NLL form the elite set; each prediction draws one
  elite uniformly and samples with the reparameterization trick. With
  discrete_states=True predicted states are rounded to integer cells, which
  gives a grid model that generalizes the motion rule but knows nothing about
  walls (the data never shows one).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .blobio import read_blob, write_blob
from .buffers import STD_FLOOR, TransitionBuffer
from .nets import Adam, GaussianHead, Mlp, gaussian_nll, gaussian_nll_loss


class NoDataError(Exception):
    """Raised by an unsmoothed tabular model for unseen (cond, action) pairs."""


def _skey(s):
    return (int(round(float(s[0]))), int(round(float(s[1]))))


class TabularModel:
    def __init__(self, direction: str, eps_lap: float = 0.0):
        if direction not in ("reverse", "forward"):
            raise ValueError(f"unknown direction {direction!r}")
        self.direction = direction
        self.kind = "tabular"
        self.eps_lap = float(eps_lap)
        self.counts: dict = {}         # (cond_key, action) -> {out_key: n}
        self.reward_sums: dict = {}    # (s_key, action) -> [sum, n]
        self.support: list = []        # all observed state keys, in first-seen order
        self.reward_fallback = 0.0
        self.state_dim = 2

    # -- fitting ----------------------------------------------------------
    def fit(self, train: TransitionBuffer):
        if train.kind != "grid":
            raise ValueError("tabular models require grid buffers")
        seen = {}
        for t in train:
            s, sn, a = _skey(t.s), _skey(t.s_next), int(t.a)
            cond, out = (sn, s) if self.direction == "reverse" else (s, sn)
            self.counts.setdefault((cond, a), {})
            self.counts[(cond, a)][out] = self.counts[(cond, a)].get(out, 0) + 1
            rs = self.reward_sums.setdefault((s, a), [0.0, 0])
            rs[0] += float(t.r)
            rs[1] += 1
            for k in (s, sn):
                if k not in seen:
                    seen[k] = None
        self.support = list(seen.keys())
        if len(train):
            self.reward_fallback = float(train.rewards().mean())
        return self

    # -- querying ---------------------------------------------------------
    def distribution(self, s_cond, a) -> dict:
        """P(out | cond, a) as {state_key: prob}; honors Laplace smoothing."""
        key = (_skey(s_cond), int(a))
        obs = self.counts.get(key)
        if obs is None and self.eps_lap == 0.0:
            raise NoDataError(f"no data for {key}")
        eps = self.eps_lap
        if eps == 0.0:
            total = sum(obs.values())
            return {k: v / total for k, v in obs.items()}
        obs = obs or {}
        total = sum(obs.values()) + eps * len(self.support)
        return {k: (obs.get(k, 0) + eps) / total for k in self.support}

    def reward_estimate(self, s, a) -> float:
        rs = self.reward_sums.get((_skey(s), int(a)))
        return rs[0] / rs[1] if rs else self.reward_fallback

    def predict(self, s_cond, a, rng: np.random.Generator):
        """Sample (out_state, reward_estimate); raises NoDataError when dry."""
        dist = self.distribution(s_cond, a)
        keys = list(dist.keys())
        probs = np.fromiter(dist.values(), dtype=float, count=len(keys))
        out = keys[int(rng.choice(len(keys), p=probs))]
        s, a = (out, a) if self.direction == "reverse" else (_skey(s_cond), a)
        return out, self.reward_estimate(s, a)

    def predict_batch(self, cond: np.ndarray, actions: np.ndarray,
                      rng: np.random.Generator):
        n = len(cond)
        actions = np.asarray(actions).reshape(-1)
        outs = np.zeros((n, self.state_dim))
        rewards = np.zeros(n)
        valid = np.ones(n, dtype=bool)
        for i in range(n):
            try:
                out, r = self.predict(cond[i], int(actions[i]), rng)
            except NoDataError:
                valid[i] = False
                continue
            outs[i] = out
            rewards[i] = r
        return outs, rewards, valid

    def mean_predict(self, cond: np.ndarray, actions: np.ndarray):
        """Probability-weighted mean out-state; identity fallback when dry."""
        n = len(cond)
        actions = np.asarray(actions).reshape(-1)
        outs = np.zeros((n, self.state_dim))
        rewards = np.zeros(n)
        covered = np.ones(n, dtype=bool)
        for i in range(n):
            try:
                dist = self.distribution(cond[i], int(actions[i]))
            except NoDataError:
                outs[i] = cond[i]
                covered[i] = False
                continue
            outs[i] = sum(np.array(k, dtype=float) * p for k, p in dist.items())
            if self.direction == "reverse":
                rewards[i] = sum(p * self.reward_estimate(k, int(actions[i]))
                                 for k, p in dist.items())
            else:
                rewards[i] = self.reward_estimate(cond[i], int(actions[i]))
        return outs, rewards, covered


def fit_tabular(train: TransitionBuffer, direction: str = "reverse",
                eps_lap: float = 0.0) -> TabularModel:
    return TabularModel(direction, eps_lap).fit(train)


def fit_tabular_reverse(train: TransitionBuffer, eps_lap: float = 0.0) -> TabularModel:
    return fit_tabular(train, "reverse", eps_lap)


def time_reversed(buf: TransitionBuffer) -> TransitionBuffer:
    """Same transitions with s and s_next swapped (for symmetry checks)."""
    out = TransitionBuffer(buf.kind, buf.layout_id, buf.seed)
    for t in buf:
        out.append(type(t)(s=t.s_next, a=t.a, r=t.r, s_next=t.s, done=t.done,
                           collided=t.collided, origin=t.origin))
        out.end_episode()
    return out


def select_elites(holdout_nll, n_elites: int) -> list:
    """Indices of the n_elites lowest values, ties broken by position."""
    order = np.argsort(np.asarray(holdout_nll, dtype=float), kind="stable")
    return [int(i) for i in order[:n_elites]]


# ---------------------------------------------------------------------------


@dataclass
class EnsembleConfig:
    direction: str = "reverse"
    n_members: int = 7
    n_elites: int = 5
    hidden: tuple = (64, 64, 64, 64)
    activation: str = "swish"
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 60
    patience: int = 5
    max_train: int = 0           # 0 = use everything; else subsample cap
    discrete_states: bool = False
    n_grid_actions: int = 4


@dataclass
class _Norm:
    mean: np.ndarray
    std: np.ndarray

    def fwd(self, x):
        return (x - self.mean) / self.std

    def inv(self, z):
        return z * self.std + self.mean


def _stats(x):
    return _Norm(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR))


class GaussianEnsemble:
    def __init__(self, cfg: EnsembleConfig, buffer_kind: str):
        self.cfg = cfg
        self.kind = "ensemble"
        self.direction = cfg.direction
        self.buffer_kind = buffer_kind
        self.members: list[Mlp] = []
        self.elites: list[int] = []
        self.holdout_nll: list[float] = []
        self.in_norm: _Norm = None
        self.out_norm: _Norm = None
        self.state_dim = 2 if buffer_kind == "grid" else 4
        # Empirical mean reward per observed (s, a) pair (discrete mode only).
        # The factored model keys the reward on the transition's own state and
        # action, so wherever that pair is in the data the lookup replaces the
        # net's smoothed estimate.
        self.reward_table: dict = {}

    # -- encoding ---------------------------------------------------------
    def _inputs(self, cond, actions):
        cond = np.asarray(cond, dtype=float).reshape(-1, self.state_dim)
        if self.buffer_kind == "grid":
            idx = np.asarray(actions, dtype=int).reshape(-1)
            enc = np.zeros((len(idx), self.cfg.n_grid_actions))
            enc[np.arange(len(idx)), idx] = 1.0
        else:
            enc = np.asarray(actions, dtype=float).reshape(-1, 2)
        return np.concatenate([cond, enc], axis=1)

    def _training_arrays(self, buf: TransitionBuffer):
        s, sn = buf.states(), buf.next_states()
        cond, out = (sn, s) if self.direction == "reverse" else (s, sn)
        x = self._inputs(cond, buf.actions())
        y = np.concatenate([out - cond, buf.rewards()[:, None]], axis=1)
        return x, y

    # -- fitting ----------------------------------------------------------
    def fit(self, train: TransitionBuffer, holdout: TransitionBuffer,
            rng: np.random.Generator):
        cfg = self.cfg
        if cfg.discrete_states:
            sums: dict = {}
            for s, a, r in zip(train.states().astype(int),
                               train.actions().reshape(-1), train.rewards()):
                key = (tuple(s.tolist()), int(a))
                acc = sums.setdefault(key, [0.0, 0])
                acc[0] += float(r)
                acc[1] += 1
            self.reward_table = {k: v[0] / v[1] for k, v in sums.items()}
        x, y = self._training_arrays(train)
        if cfg.max_train and len(x) > cfg.max_train:
            pick = rng.choice(len(x), size=cfg.max_train, replace=False)
            x, y = x[pick], y[pick]
        self.in_norm, self.out_norm = _stats(x), _stats(y)
        xn, yn = self.in_norm.fwd(x), self.out_norm.fwd(y)
        hx, hy = self._training_arrays(holdout)
        hxn, hyn = self.in_norm.fwd(hx), self.out_norm.fwd(hy)

        dims = [xn.shape[1]] + list(cfg.hidden) + [2 * yn.shape[1]]
        acts = [cfg.activation] * len(cfg.hidden) + ["linear"]
        member_seeds = rng.integers(0, 2**31 - 1, size=cfg.n_members)
        self.members, self.holdout_nll = [], []
        for seed in member_seeds:
            mrng = np.random.default_rng(int(seed))
            net = Mlp(dims, acts, mrng)
            opt = Adam(net.params(), lr=cfg.lr)
            best_nll, best_params, since_best = np.inf, None, 0
            for _ in range(cfg.max_epochs):
                order = mrng.permutation(len(xn))
                for lo in range(0, len(order), cfg.batch_size):
                    sel = order[lo : lo + cfg.batch_size]
                    net.zero_grads()
                    gaussian_nll_loss(net, xn[sel], yn[sel])
                    opt.step(net.grads())
                nll = float(gaussian_nll(GaussianHead(net.forward(hxn)), hyn).mean())
                if not np.isfinite(nll):
                    raise FloatingPointError(
                        f"ensemble member {len(self.members)} diverged: "
                        f"holdout NLL is {nll}")
                if nll < best_nll - 1e-6:
                    best_nll, since_best = nll, 0
                    best_params = [p.copy() for p in net.params()]
                else:
                    since_best += 1
                    if since_best >= cfg.patience:
                        break
            if best_params is not None:
                for p, bp in zip(net.params(), best_params):
                    p[:] = bp
            self.members.append(net)
            self.holdout_nll.append(best_nll)
        self.elites = select_elites(self.holdout_nll, cfg.n_elites)
        return self

    # -- querying ---------------------------------------------------------
    def predict_batch(self, cond: np.ndarray, actions: np.ndarray,
                      rng: np.random.Generator):
        cond = np.asarray(cond, dtype=float).reshape(-1, self.state_dim)
        n = len(cond)
        xn = self.in_norm.fwd(self._inputs(cond, actions))
        member_of = rng.choice(np.array(self.elites), size=n)
        eps = rng.standard_normal((n, len(self.out_norm.mean)))
        yn = np.zeros((n, len(self.out_norm.mean)))
        for m in self.elites:
            rows = member_of == m
            if not rows.any():
                continue
            head = GaussianHead(self.members[m].forward(xn[rows]))
            yn[rows] = head.sample(rng, eps=eps[rows])[0]
        y = self.out_norm.inv(yn)
        out = cond + y[:, : self.state_dim]
        rewards = y[:, self.state_dim]
        if self.cfg.discrete_states:
            out = np.rint(out)
            rewards = self._override_rewards(out, cond, actions, rewards)
        return out, rewards, np.ones(n, dtype=bool)

    def _override_rewards(self, out, cond, actions, rewards):
        if not self.reward_table:
            return rewards
        own = out if self.direction == "reverse" else cond
        own = np.rint(own).astype(int)
        acts = np.asarray(actions, dtype=int).reshape(-1)
        rewards = rewards.copy()
        for i in range(len(rewards)):
            hit = self.reward_table.get((tuple(own[i].tolist()), int(acts[i])))
            if hit is not None:
                rewards[i] = hit
        return rewards

    def predict(self, s_cond, a, rng: np.random.Generator):
        out, r, _ = self.predict_batch(
            np.asarray(s_cond, dtype=float)[None, :], np.asarray([a]), rng)
        return out[0], float(r[0])

    def mean_predict(self, cond: np.ndarray, actions: np.ndarray):
        """Elite-averaged mean prediction (de-normalized), no sampling."""
        cond = np.asarray(cond, dtype=float).reshape(-1, self.state_dim)
        xn = self.in_norm.fwd(self._inputs(cond, actions))
        mus = []
        for m in self.elites:
            mus.append(GaussianHead(self.members[m].forward(xn)).mu)
        y = self.out_norm.inv(np.mean(mus, axis=0))
        out = cond + y[:, : self.state_dim]
        rewards = y[:, self.state_dim]
        if self.cfg.discrete_states:
            out = np.rint(out)
            rewards = self._override_rewards(out, cond, actions, rewards)
        return out, rewards, np.ones(len(cond), dtype=bool)


def fit_gaussian_ensemble(train: TransitionBuffer, holdout: TransitionBuffer,
                          cfg: EnsembleConfig,
                          rng: np.random.Generator) -> GaussianEnsemble:
    return GaussianEnsemble(cfg, train.kind).fit(train, holdout, rng)


def evaluate_model_error(model, holdout: TransitionBuffer) -> dict:
    """MSE of the de-normalized mean state prediction over a holdout buffer."""
    s, sn, a = holdout.states(), holdout.next_states(), holdout.actions()
    cond, target = (sn, s) if model.direction == "reverse" else (s, sn)
    pred, pred_r, covered = model.mean_predict(cond, a)
    err = (pred - target) ** 2
    return {
        "direction": model.direction,
        "model": model.kind,
        "mse_state": float(err.mean()),
        "per_dim": [float(v) for v in err.mean(axis=0)],
        "mse_reward": float(((pred_r - holdout.rewards()) ** 2).mean()),
        "coverage": float(np.mean(covered)),
        "n_holdout": len(holdout),
    }


def model_error_comparison(train: TransitionBuffer, holdout: TransitionBuffer,
                           cfg: EnsembleConfig,
                           rng: np.random.Generator) -> dict:
    """Fit one ensemble per direction on the same split; MSEs side by side."""
    out = {}
    for direction in ("forward", "reverse"):
        dcfg = dataclasses.replace(cfg, direction=direction)
        member_rng = np.random.default_rng(int(rng.integers(2**31 - 1)))
        model = fit_gaussian_ensemble(train, holdout, dcfg, member_rng)
        out[direction] = evaluate_model_error(model, holdout)
    return out


# -- checkpoints ------------------------------------------------------------

MODEL_FORMAT = "romilab-model-v1"


def save_model(model, path) -> None:
    if model.kind == "tabular":
        rows = []
        for (cond, a), outs in model.counts.items():
            for out, n in outs.items():
                rows.append([cond[0], cond[1], a, out[0], out[1], n])
        rrows = [[k[0][0], k[0][1], k[1], v[0], v[1]]
                 for k, v in model.reward_sums.items()]
        header = {
            "format": MODEL_FORMAT, "model": "tabular",
            "direction": model.direction, "eps_lap": model.eps_lap,
            "support": [list(k) for k in model.support],
            "reward_fallback": model.reward_fallback,
        }
        write_blob(path, header, [np.array(rows, dtype=float).reshape(-1, 6),
                                  np.array(rrows, dtype=float).reshape(-1, 5)])
        return
    cfg = model.cfg
    header = {
        "format": MODEL_FORMAT, "model": "ensemble",
        "buffer_kind": model.buffer_kind,
        "cfg": {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in vars(cfg).items()},
        "elites": model.elites,
        "holdout_nll": [float(v) for v in model.holdout_nll],
        "in_mean": model.in_norm.mean.tolist(), "in_std": model.in_norm.std.tolist(),
        "out_mean": model.out_norm.mean.tolist(), "out_std": model.out_norm.std.tolist(),
        "layer_dims": model.members[0].layer_dims,
        "activations": model.members[0].activations,
    }
    arrays = []
    for net in model.members:
        arrays.extend(net.W)
        arrays.extend(net.b)
    rrows = [[k[0][0], k[0][1], k[1], v] for k, v in model.reward_table.items()]
    arrays.append(np.array(rrows, dtype=float).reshape(-1, 4))
    write_blob(path, header, arrays)


def load_model(path):
    header, arrays = read_blob(path)
    if header.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path} is not a model checkpoint")
    if header["model"] == "tabular":
        model = TabularModel(header["direction"], header["eps_lap"])
        for cr, cc, a, outr, outc, n in arrays[0]:
            key = ((int(cr), int(cc)), int(a))
            model.counts.setdefault(key, {})[(int(outr), int(outc))] = int(round(float(n)))
        for sr, sc, a, tot, n in arrays[1]:
            model.reward_sums[((int(sr), int(sc)), int(a))] = [float(tot), int(round(float(n)))]
        model.support = [tuple(int(v) for v in k) for k in header["support"]]
        model.reward_fallback = float(header["reward_fallback"])
        return model
    cfg_d = dict(header["cfg"])
    cfg_d["hidden"] = tuple(cfg_d["hidden"])
    cfg = EnsembleConfig(**cfg_d)
    model = GaussianEnsemble(cfg, header["buffer_kind"])
    model.elites = [int(i) for i in header["elites"]]
    model.holdout_nll = [float(v) for v in header["holdout_nll"]]
    model.in_norm = _Norm(np.array(header["in_mean"]), np.array(header["in_std"]))
    model.out_norm = _Norm(np.array(header["out_mean"]), np.array(header["out_std"]))
    dims, acts = header["layer_dims"], header["activations"]
    n_arr = len(dims) - 1
    model.members = []
    for m in range(cfg.n_members):
        net = Mlp(dims, acts)
        chunk = arrays[m * 2 * n_arr : (m + 1) * 2 * n_arr]
        for i in range(n_arr):
            net.W[i] = chunk[i].astype(float)
            net.b[i] = chunk[n_arr + i].astype(float)
        net.gW = [np.zeros_like(w) for w in net.W]
        net.gb = [np.zeros_like(b) for b in net.b]
        model.members.append(net)
    model.reward_table = {
        ((int(r), int(c)), int(a)): float(v)
        for r, c, a, v in arrays[cfg.n_members * 2 * n_arr]}
    return model
