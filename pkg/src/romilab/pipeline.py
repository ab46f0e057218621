"""End-to-end runs: data -> model -> imagination -> learner -> eval.

One RunConfig describes one arm (a direction/eta/policy choice). A study is
an ablation grid: a base config plus per-arm overrides, sharing the per-seed
dataset across arms (asserted by content hash) so arms differ only where the
overrides say they do. Every run directory carries its resolved config, the
artifact hashes, and a one-row eval.csv; the study root merges all rows and
adds per-arm aggregate rows with deltas against the base arm.
"""

from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .agents import LearnerConfig, QTable, train_policy
from .behavior import generate_behavior_dataset
from .buffers import (MixedSampler, TransitionBuffer, load_buffer,
                      priority_weights, save_buffer, split_holdout)
from .config import (STAGES, RunConfig, apply_overrides, content_hash,
                     seed_streams)
from .evaluation import (EvalReport, compute_score_reference, evaluate_policy,
                         run_episodes, write_eval_csv)
from .imagination import (CvaeConfig, ImaginationConfig, RbcConfig, imagine,
                          make_rollout_policy, trajectories_to_buffer)
from .mazes import make_maze
from .models import (EnsembleConfig, evaluate_model_error,
                     fit_gaussian_ensemble, fit_tabular, save_model)


def default_out_dir(cfg_out: str = "") -> Path:
    if cfg_out:
        return Path(cfg_out)
    return Path(os.environ.get("ROMI_LAB_OUT", "runs"))


def _make_spec(cfg: RunConfig):
    env = cfg.env
    return make_maze(env.layout, env.kind, env.reward_mode,
                     episode_limit=env.episode_limit or None,
                     goal_terminal=env.goal_terminal)


def _fit_model(cfg: RunConfig, spec, data, rng, counter_rng=None):
    """Fit the rollout-direction model; with counter_rng also fit the opposite
    direction on the same split so the error report carries both sides."""
    m = cfg.model
    direction = cfg.rollout.direction
    if m.model == "tabular":
        return fit_tabular(data, direction=direction, eps_lap=m.eps_lap), None
    holdout_n = min(cfg.data.holdout, max(1, len(data) // 10))
    train, holdout = split_holdout(data, holdout_n, rng)
    ecfg = EnsembleConfig(
        direction=direction, n_members=m.n_members, n_elites=m.n_elites,
        hidden=tuple(m.hidden), activation=m.activation, lr=m.lr,
        batch_size=m.batch_size, max_epochs=m.max_epochs, patience=m.patience,
        max_train=m.max_train,
        discrete_states=(m.discrete_states and spec.kind == "grid"))
    model = fit_gaussian_ensemble(train, holdout, ecfg, rng)
    err = {direction: evaluate_model_error(model, holdout)}
    if counter_rng is not None:
        other = "forward" if direction == "reverse" else "reverse"
        counter = fit_gaussian_ensemble(
            train, holdout, dataclasses.replace(ecfg, direction=other),
            counter_rng)
        err[other] = evaluate_model_error(counter, holdout)
    return model, err


def _imagine(cfg: RunConfig, spec, model, data, rng):
    r = cfg.rollout
    policy = make_rollout_policy(
        r.policy, data, r.direction, rng,
        cvae_cfg=CvaeConfig(), rbc_cfg=RbcConfig())
    weights = (priority_weights(data, "return_weighted")
               if r.start_mode == "return_weighted" else None)
    icfg = ImaginationConfig(direction=r.direction, horizon=r.horizon,
                             n_rollouts=r.n_rollouts or len(data))
    trajectories, report = imagine(model, policy, data, icfg, rng,
                                   weights=weights, spec=spec)
    return trajectories_to_buffer(trajectories, spec.kind, spec.layout_id), report


def _train(cfg: RunConfig, data, model_buf, rng):
    t = cfg.learner
    lcfg = LearnerConfig(algo=t.algo, gamma=t.gamma, lr=t.lr,
                         batch_size=t.batch_size, steps=t.steps,
                         bcq_threshold=t.bcq_threshold, cql_alpha=t.cql_alpha,
                         tile_size=t.tile_size, q_init=t.q_init, eta=t.eta)
    eta = t.eta if model_buf is not None and len(model_buf) else 0.0
    sampler = MixedSampler(data, model_buf, eta, t.batch_size, rng)
    return train_policy(sampler, lcfg, rng)


def run_pipeline(cfg: RunConfig, out_root=None, seed: int = None,
                 shared_data: Path = None) -> list:
    """All stages for each seed; returns one EvalReport per seed."""
    out_root = default_out_dir(cfg.out_dir) if out_root is None else Path(out_root)
    seeds = [seed] if seed is not None else list(cfg.seeds)
    reports = []
    for sd in seeds:
        run_dir = out_root / cfg.label / f"seed{int(sd):03d}"
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(run_dir / "config.json")
        streams = seed_streams(int(sd), STAGES + ("model_b", "figures"))
        spec = _make_spec(cfg)
        hashes = {}

        if shared_data is not None:
            data = load_buffer(shared_data)
            hashes["dataset_source"] = content_hash(shared_data)
        else:
            data = generate_behavior_dataset(
                spec, cfg.data.n_transitions,
                np.random.default_rng(streams["data"]))
        save_buffer(data, run_dir / "dataset.bin")
        hashes["dataset"] = content_hash(run_dir / "dataset.bin")

        model_buf, direction = None, cfg.rollout.direction
        if direction != "none":
            model_rng = np.random.default_rng(streams["model"])
            counter_rng = np.random.default_rng(streams["model_b"])
            model, model_err = _fit_model(cfg, spec, data, model_rng,
                                          counter_rng=counter_rng)
            save_model(model, run_dir / "model.bin")
            hashes["model"] = content_hash(run_dir / "model.bin")
            if model_err is not None:
                _write_model_error(model_err, run_dir)
            model_buf, roll_report = _imagine(
                cfg, spec, model, data, np.random.default_rng(streams["rollout"]))
            save_buffer(model_buf, run_dir / "imagined.bin")
            hashes["imagined"] = content_hash(run_dir / "imagined.bin")
            with open(run_dir / "rollout_report.json", "w") as fh:
                json.dump(roll_report.to_dict(), fh, indent=2)

        qt = _train(cfg, data, model_buf, np.random.default_rng(streams["learner"]))
        qt.save(run_dir / "qtable.json")
        hashes["qtable"] = content_hash(run_dir / "qtable.json")

        eval_rng = np.random.default_rng(streams["eval"])
        ref = compute_score_reference(spec, eval_rng,
                                      cfg.eval.n_reference_episodes)
        report = evaluate_policy(
            spec, qt, data, ref, cfg.eval.n_episodes, eval_rng,
            meta={"arm": cfg.label, "seed": sd, "algo": cfg.learner.algo,
                  "direction": direction, "policy": cfg.rollout.policy,
                  "eta": cfg.learner.eta if direction != "none" else 0.0,
                  "horizon": cfg.rollout.horizon})
        write_eval_csv([report], run_dir / "eval.csv", delta_base=cfg.label)
        with open(run_dir / "reference.json", "w") as fh:
            json.dump(ref.to_dict(), fh, indent=2)
        with open(run_dir / "hashes.json", "w") as fh:
            json.dump(hashes, fh, indent=2, sort_keys=True)
        _run_figures(cfg, spec, qt, data, run_dir,
                     np.random.default_rng(streams["figures"]))
        reports.append(report)
    return reports


def _write_model_error(model_err: dict, run_dir: Path) -> None:
    """Side-by-side per-direction error report, as JSON and a small CSV."""
    with open(run_dir / "model_error.json", "w") as fh:
        json.dump(model_err, fh, indent=2, sort_keys=True)
    cols = ("direction", "model", "mse_state", "mse_reward", "coverage",
            "n_holdout")
    lines = [",".join(cols)]
    for direction in sorted(model_err):
        row = model_err[direction]
        lines.append(",".join(str(row[c]) for c in cols))
    with open(run_dir / "model_error.csv", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _run_figures(cfg, spec, qt, data, run_dir, rng) -> None:
    from .plots import plot_distance_heatmap, plot_trajectories

    try:
        batch = run_episodes(spec, qt, min(8, cfg.eval.n_episodes), rng)
        plot_trajectories(spec, {cfg.label.rsplit("/", 1)[-1]: batch},
                          run_dir / "trajectories.svg")
        plot_distance_heatmap(spec, data, run_dir / "distance_heatmap.svg",
                              title=spec.layout_id)
    except Exception as exc:  # figures are a convenience, never fail the run
        with open(run_dir / "plot_error.txt", "w") as fh:
            fh.write(repr(exc) + "\n")


def _grid_worker(args):
    """One (arm, seed) cell. Failures are recorded, not raised, so the grid
    continues; a shared-dataset checksum mismatch still aborts the study."""
    cfg_dict, out_root, seed, data_path, expect_hash = args
    cfg = RunConfig.from_dict(cfg_dict)
    data_path = Path(data_path)
    got = content_hash(data_path)
    if got != expect_hash:
        raise AssertionError(
            f"shared dataset hash mismatch for seed {seed}: {got} != {expect_hash}")
    try:
        return ("ok", run_pipeline(cfg, out_root=out_root, seed=seed,
                                   shared_data=data_path)[0])
    except AssertionError:
        raise
    except Exception as exc:
        return ("error", f"{type(exc).__name__}: {exc}")


def run_ablation_grid(base: RunConfig, arms: dict, out_root=None,
                      jobs: int = 1, delta_base: str = None) -> list:
    """Run every (arm, seed) cell on shared per-seed datasets.

    arms maps arm label -> list of dotted overrides applied to the base
    config. Returns EvalReports ordered by (arm, seed); writes the merged
    eval.csv, summary.json, and comparison figures at the study root.
    """
    out_root = default_out_dir(base.out_dir) if out_root is None else Path(out_root)
    study_dir = out_root / base.label
    study_dir.mkdir(parents=True, exist_ok=True)

    data_dir = study_dir / "datasets"
    data_dir.mkdir(exist_ok=True)
    spec = _make_spec(base)
    shared = {}
    for sd in base.seeds:
        path = data_dir / f"seed{int(sd):03d}.bin"
        if not path.exists():
            streams = seed_streams(int(sd))
            data = generate_behavior_dataset(
                spec, base.data.n_transitions,
                np.random.default_rng(streams["data"]))
            save_buffer(data, path)
        shared[sd] = (path, content_hash(path))

    tasks, order = [], []
    for arm, overrides in arms.items():
        cfg = apply_overrides(base, list(overrides))
        cfg.label = f"{base.label}/{arm}"
        for sd in base.seeds:
            tasks.append((cfg.to_dict(), str(study_dir / "arms"), int(sd),
                          str(shared[sd][0]), shared[sd][1]))
            order.append((arm, int(sd)))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_grid_worker, tasks))
    else:
        results = [_grid_worker(t) for t in tasks]

    reports, failures = [], {}
    for (arm, sd), (status, payload) in zip(order, results):
        if status == "ok":
            payload.arm = arm
            reports.append(payload)
        else:
            failures[f"{arm}/seed{sd:03d}"] = payload

    delta_base = delta_base or next(iter(arms))
    write_eval_csv(reports, study_dir / "eval.csv", delta_base=delta_base)
    summary = _summarize(reports)
    if failures:
        summary["failures"] = failures
    with open(study_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    _study_figures(base, arms, reports, study_dir)
    if failures:
        for cell, msg in failures.items():
            print(f"arm cell failed: {cell}: {msg}")
    return reports


def _summarize(reports):
    arms = {}
    for r in reports:
        arms.setdefault(r.arm, []).append(r)
    out = {}
    for arm, rows in arms.items():
        entry = {"seeds": [r.seed for r in rows]}
        for field in ("success_rate", "collision_rate", "normalized_score",
                      "raw_return_mean", "atd_mean"):
            vals = [getattr(r, field) for r in rows]
            entry[field] = float(np.mean(vals))
            entry[field + "_std"] = float(np.std(vals))
        out[arm] = entry
    return out


def _study_figures(base, arms, reports, study_dir):
    from .plots import plot_arm_bars

    try:
        plot_arm_bars(reports,
                      ("success_rate", "collision_rate", "normalized_score",
                       "atd_mean"),
                      study_dir / "arms.svg", title=base.label)
    except Exception as exc:  # figures are a convenience, never fail the study
        with open(study_dir / "plot_error.txt", "w") as fh:
            fh.write(repr(exc) + "\n")


_ASSERT_OPS = {
    ">=": lambda a, b: a >= b,
    ">": lambda a, b: a > b,
    "<=": lambda a, b: a <= b,
    "<": lambda a, b: a < b,
}


def check_assertions(summary: dict, assertions: list) -> list:
    """Evaluate declarative study assertions against a grid summary.

    Each assertion compares one arm's aggregate metric against another arm's
    (key "other") or a constant (key "value"), optionally shifted by "margin":
    metric[arm] op metric[other] + margin. Returns failure messages.
    """
    failures = []
    for spec in assertions or []:
        metric, arm, op = spec["metric"], spec["arm"], spec["op"]
        if op not in _ASSERT_OPS:
            raise ValueError(f"unknown assertion op {op!r}")
        if arm not in summary:
            failures.append(f"assertion arm {arm!r} missing from summary")
            continue
        left = summary[arm][metric]
        if "other" in spec:
            if spec["other"] not in summary:
                failures.append(
                    f"assertion arm {spec['other']!r} missing from summary")
                continue
            right = summary[spec["other"]][metric]
            label = f"{metric}[{spec['other']}]"
        else:
            right = float(spec["value"])
            label = str(right)
        margin = float(spec.get("margin", 0.0))
        if not _ASSERT_OPS[op](left, right + margin):
            shift = f" + {margin:g}" if margin else ""
            failures.append(
                f"{metric}[{arm}] = {left:.4g} is not {op} {label}{shift} "
                f"(= {right + margin:.4g})")
    return failures


# -- shipped study presets ----------------------------------------------------

PRESETS = {
    "umaze-direction-study": {
        "base": {
            "label": "umaze-direction-study",
            "seeds": [0, 1, 2, 3, 4],
            "env": {"layout": "umaze", "kind": "grid", "reward_mode": "sparse"},
            "data": {"n_transitions": 50_000, "holdout": 2_000},
            "model": {"model": "ensemble", "n_members": 7, "n_elites": 5,
                      "hidden": [64, 64], "max_epochs": 40, "patience": 5,
                      "max_train": 10_000, "discrete_states": True},
            # horizon 1: a second reverse hop would continue from wall-cell
            # predecessors and plant admissible wall-crossing pairs, breaking
            # the reverse arm for reasons unrelated to rollout direction
            "rollout": {"direction": "reverse", "policy": "uniform",
                        "horizon": 1, "n_rollouts": 50_000},
            # q_init = 1 / (1 - gamma): optimistic initialization stands in
            # for extrapolation error.  Forward rollouts point into states the
            # data never visits, and those states keep the inflated init;
            # reverse rollouts always point back into dataset states whose
            # values are pinned by real experience.
            "learner": {"algo": "bcq_discrete", "gamma": 0.95, "lr": 0.25,
                        "batch_size": 64, "steps": 120_000,
                        "bcq_threshold": 0.15, "eta": 0.7, "q_init": 20.0},
            "eval": {"n_episodes": 50, "n_reference_episodes": 100},
        },
        "arms": {
            "base": ["rollout.direction=none", "learner.eta=0.0"],
            "romi": ["rollout.direction=reverse"],
            "fomi": ["rollout.direction=forward"],
        },
        "delta_base": "base",
        "assert": [
            {"metric": "success_rate", "arm": "romi", "op": ">=",
             "other": "base"},
            {"metric": "success_rate", "arm": "romi", "op": ">=",
             "other": "fomi", "margin": 0.2},
            {"metric": "collision_rate", "arm": "fomi", "op": ">",
             "other": "romi"},
            {"metric": "atd_mean", "arm": "romi", "op": "<=",
             "other": "fomi", "margin": 0.1},
        ],
    },
    "umaze-rollout-length": {
        "base": {
            "label": "umaze-rollout-length",
            "seeds": [0, 1],
            "env": {"layout": "umaze", "kind": "grid", "reward_mode": "sparse"},
            "data": {"n_transitions": 20_000},
            "model": {"model": "tabular"},
            "rollout": {"direction": "reverse", "policy": "empirical",
                        "horizon": 2, "n_rollouts": 20_000},
            "learner": {"algo": "bcq_discrete", "gamma": 0.95, "lr": 0.25,
                        "batch_size": 64, "steps": 60_000,
                        "bcq_threshold": 0.15, "eta": 0.5},
            "eval": {"n_episodes": 30, "n_reference_episodes": 50},
        },
        "arms": {
            "h1": ["rollout.horizon=1"],
            "h5": ["rollout.horizon=5"],
            "h10": ["rollout.horizon=10"],
            "h20": ["rollout.horizon=20"],
        },
        "delta_base": "h1",
    },
    "umaze-eta-sweep": {
        "base": {
            "label": "umaze-eta-sweep",
            "seeds": [0, 1],
            "env": {"layout": "umaze", "kind": "grid", "reward_mode": "sparse"},
            "data": {"n_transitions": 20_000},
            "model": {"model": "tabular"},
            "rollout": {"direction": "reverse", "policy": "empirical",
                        "horizon": 2, "n_rollouts": 20_000},
            "learner": {"algo": "bcq_discrete", "gamma": 0.95, "lr": 0.25,
                        "batch_size": 64, "steps": 60_000,
                        "bcq_threshold": 0.15, "eta": 0.5},
            "eval": {"n_episodes": 30, "n_reference_episodes": 50},
        },
        "arms": {
            "eta01": ["learner.eta=0.1"],
            "eta03": ["learner.eta=0.3"],
            "eta05": ["learner.eta=0.5"],
            "eta07": ["learner.eta=0.7"],
            "eta09": ["learner.eta=0.9"],
        },
        "delta_base": "eta01",
    },
}


def load_preset(name: str) -> tuple:
    """(base config, arms, delta_base arm, assertion list) for a shipped study."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    entry = PRESETS[name]
    base = RunConfig.from_dict(json.loads(json.dumps(entry["base"])))
    arms = {arm: list(overrides) for arm, overrides in entry["arms"].items()}
    return (base, arms, entry.get("delta_base"),
            json.loads(json.dumps(entry.get("assert", []))))
