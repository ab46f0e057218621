"""Command line interface.

Subcommands mirror the pipeline stages plus two orchestrators:

  gen-data    roll the behavior policy and save a transition buffer
  fit-model   fit a dynamics model (tabular or ensemble) on a buffer
  imagine     run anchored model rollouts and save the imagined buffer
  train       train the conservative learner on env (+ imagined) data
  eval        evaluate a saved policy table and write an eval.csv
  pipeline    all stages for one config (one arm, one or more seeds)
  ablate      run a preset or configured ablation grid across arms/seeds

An ablate config (or preset) may carry an "assert" block: a list of
{"metric", "arm", "op", "other"|"value", "margin"} comparisons checked
against the per-arm aggregates after the grid completes.

Exit codes: 0 success, 2 configuration error, 3 stage failure,
4 checksum/assertion failure (including unmet study assertions). The output
root defaults to $ROMI_LAB_OUT, then ./runs; per-stage --out flags name
files directly.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


class ConfigError(Exception):
    pass


class ChecksumError(Exception):
    pass


def _load_run_config(args):
    from .config import RunConfig, apply_overrides

    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = list(getattr(args, "set", None) or [])
    for flag, key in (("seed", None), ("eta", "learner.eta"),
                      ("horizon", "rollout.horizon"),
                      ("direction", "rollout.direction"),
                      ("policy", "rollout.policy"), ("algo", "learner.algo"),
                      ("layout", "env.layout"), ("kind", "env.kind"),
                      ("reward_mode", "env.reward_mode")):
        val = getattr(args, flag, None)
        if val is not None and key:
            overrides.append(f"{key}={val}")
    cfg = apply_overrides(cfg, overrides)
    if getattr(args, "seed", None) is not None:
        cfg.seeds = (int(args.seed),)
    if getattr(args, "out", None):
        cfg.out_dir = str(args.out)
    return cfg


def _cmd_gen_data(args):
    from .behavior import generate_behavior_dataset
    from .buffers import export_csv, save_buffer
    from .mazes import make_maze

    cfg = _load_run_config(args)
    spec = make_maze(cfg.env.layout, cfg.env.kind, cfg.env.reward_mode,
                     episode_limit=cfg.env.episode_limit or None,
                     goal_terminal=cfg.env.goal_terminal)
    n = cfg.data.n_transitions if args.n is None else args.n
    if n <= 0:
        raise ConfigError(f"n_transitions must be positive, got {n}")
    buf = generate_behavior_dataset(spec, n, np.random.default_rng(cfg.seeds[0]))
    out = Path(args.out or "dataset.bin")
    save_buffer(buf, out)
    manifest = {
        "seed": int(cfg.seeds[0]), "layout": cfg.env.layout,
        "kind": cfg.env.kind, "reward_mode": cfg.env.reward_mode,
        "n_transitions": len(buf), "n_episodes": len(buf._closed()),
        "collision_count": int(buf.collideds().sum()),
    }
    with open(out.with_suffix(".manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    if args.csv:
        export_csv(buf, args.csv)
    print(f"wrote {len(buf)} transitions to {out}")
    return 0


def _cmd_fit_model(args):
    from .buffers import load_buffer, split_holdout
    from .models import (EnsembleConfig, evaluate_model_error,
                         fit_gaussian_ensemble, fit_tabular, save_model)

    cfg = _load_run_config(args)
    data = load_buffer(args.data)
    rng = np.random.default_rng(cfg.seeds[0])
    direction = cfg.rollout.direction
    if direction == "none":
        raise ConfigError("fit-model needs --direction reverse or forward")
    if (args.model or cfg.model.model) == "tabular":
        model = fit_tabular(data, direction=direction, eps_lap=cfg.model.eps_lap)
        err = None
    else:
        m = cfg.model
        train, holdout = split_holdout(
            data, min(cfg.data.holdout, max(1, len(data) // 10)), rng)
        ecfg = EnsembleConfig(
            direction=direction, n_members=m.n_members, n_elites=m.n_elites,
            hidden=tuple(m.hidden), activation=m.activation, lr=m.lr,
            batch_size=m.batch_size, max_epochs=m.max_epochs,
            patience=m.patience, max_train=m.max_train,
            discrete_states=(m.discrete_states and data.kind == "grid"))
        model = fit_gaussian_ensemble(train, holdout, ecfg, rng)
        err = evaluate_model_error(model, holdout)
    out = Path(args.out or "model.bin")
    save_model(model, out)
    print(f"wrote {direction} {model.kind} model to {out}")
    if err is not None:
        report_path = out.with_suffix(".error.json")
        with open(report_path, "w") as fh:
            json.dump(err, fh, indent=2)
        print(f"holdout state mse {err['mse_state']:.6g} ({report_path})")
    return 0


def _cmd_imagine(args):
    from .buffers import load_buffer, priority_weights, save_buffer
    from .imagination import (CvaeConfig, ImaginationConfig, RbcConfig,
                              imagine, make_rollout_policy,
                              trajectories_to_buffer)
    from .mazes import make_maze
    from .models import load_model

    cfg = _load_run_config(args)
    data = load_buffer(args.data)
    model = load_model(args.model)
    direction = cfg.rollout.direction
    if model.direction != direction:
        raise ConfigError(
            f"model was fit for direction {model.direction!r}, "
            f"config asks for {direction!r}")
    rng = np.random.default_rng(cfg.seeds[0])
    spec = make_maze(cfg.env.layout, cfg.env.kind, cfg.env.reward_mode,
                     episode_limit=cfg.env.episode_limit or None,
                     goal_terminal=cfg.env.goal_terminal)
    policy = make_rollout_policy(cfg.rollout.policy, data, direction, rng,
                                 cvae_cfg=CvaeConfig(), rbc_cfg=RbcConfig())
    weights = (priority_weights(data, "return_weighted")
               if cfg.rollout.start_mode == "return_weighted" else None)
    icfg = ImaginationConfig(direction=direction, horizon=cfg.rollout.horizon,
                             n_rollouts=cfg.rollout.n_rollouts or len(data))
    trajectories, report = imagine(model, policy, data, icfg, rng,
                                   weights=weights, spec=spec)
    buf = trajectories_to_buffer(trajectories, data.kind, data.layout_id)
    out = Path(args.out or "imagined.bin")
    save_buffer(buf, out)
    with open(out.with_suffix(".report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    print(f"wrote {len(buf)} imagined transitions to {out} "
          f"(mean rollout length {report.mean_length:.2f})")
    return 0


def _cmd_train(args):
    from .agents import LearnerConfig, train_policy
    from .buffers import MixedSampler, load_buffer

    cfg = _load_run_config(args)
    data = load_buffer(args.data)
    model_buf = load_buffer(args.imagined) if args.imagined else None
    t = cfg.learner
    eta = t.eta if model_buf is not None and len(model_buf) else 0.0
    lcfg = LearnerConfig(algo=t.algo, gamma=t.gamma, lr=t.lr,
                         batch_size=t.batch_size, steps=t.steps,
                         bcq_threshold=t.bcq_threshold, cql_alpha=t.cql_alpha,
                         tile_size=t.tile_size, q_init=t.q_init, eta=eta)
    rng = np.random.default_rng(cfg.seeds[0])
    sampler = MixedSampler(data, model_buf, eta, t.batch_size, rng)
    qt = train_policy(sampler, lcfg, rng)
    out = Path(args.out or "qtable.json")
    qt.save(out)
    print(f"wrote policy table ({qt.meta['algo']}, eta={eta}) to {out}")
    return 0


def _cmd_eval(args):
    from .agents import QTable
    from .buffers import load_buffer
    from .evaluation import (compute_score_reference, evaluate_policy,
                             write_eval_csv)
    from .mazes import make_maze

    cfg = _load_run_config(args)
    data = load_buffer(args.data)
    qt = QTable.load(args.qtable)
    spec = make_maze(cfg.env.layout, cfg.env.kind, cfg.env.reward_mode,
                     episode_limit=cfg.env.episode_limit or None,
                     goal_terminal=cfg.env.goal_terminal)
    rng = np.random.default_rng(cfg.seeds[0])
    ref = compute_score_reference(spec, rng, cfg.eval.n_reference_episodes)
    report = evaluate_policy(
        spec, qt, data, ref, cfg.eval.n_episodes, rng,
        meta={"arm": cfg.label, "seed": cfg.seeds[0],
              "algo": qt.meta.get("algo", ""),
              "direction": cfg.rollout.direction,
              "policy": cfg.rollout.policy, "eta": qt.meta.get("eta", 0.0),
              "horizon": cfg.rollout.horizon})
    out = Path(args.out or "eval.csv")
    write_eval_csv([report], out, delta_base=cfg.label)
    print(f"success {report.success_rate:.2f} collide "
          f"{report.collision_rate:.2f} score {report.normalized_score:.1f} "
          f"-> {out}")
    return 0


def _cmd_pipeline(args):
    from .pipeline import default_out_dir, run_pipeline

    cfg = _load_run_config(args)
    out_root = default_out_dir(cfg.out_dir)
    reports = run_pipeline(cfg, out_root=out_root)
    for r in reports:
        print(f"seed {r.seed}: success {r.success_rate:.2f} "
              f"collide {r.collision_rate:.2f} score {r.normalized_score:.1f}")
    print(f"artifacts under {out_root / cfg.label}")
    return 0


def _cmd_ablate(args):
    from .config import apply_overrides
    from .pipeline import (check_assertions, default_out_dir, load_preset,
                           run_ablation_grid)

    if args.preset:
        base, arms, delta_base, assertions = load_preset(args.preset)
    elif args.config:
        with open(args.config) as fh:
            spec = json.load(fh)
        from .config import RunConfig
        base = RunConfig.from_dict(spec["base"])
        arms = {k: list(v) for k, v in spec["arms"].items()}
        delta_base = spec.get("delta_base")
        assertions = list(spec.get("assert", []))
    else:
        raise ConfigError("ablate needs --preset or --config")
    if args.set:
        base = apply_overrides(base, list(args.set))
    if args.seed is not None:
        base.seeds = (int(args.seed),)
    if args.out:
        base.out_dir = str(args.out)
    out_root = default_out_dir(base.out_dir)
    reports = run_ablation_grid(base, arms, out_root=out_root,
                                jobs=args.jobs, delta_base=delta_base)
    arms_seen = []
    for r in reports:
        if r.arm not in arms_seen:
            arms_seen.append(r.arm)
    for arm in arms_seen:
        rows = [r for r in reports if r.arm == arm]
        print(f"{arm}: success {np.mean([r.success_rate for r in rows]):.2f} "
              f"collide {np.mean([r.collision_rate for r in rows]):.2f} "
              f"score {np.mean([r.normalized_score for r in rows]):.1f} "
              f"({len(rows)} seeds)")
    print(f"study artifacts under {out_root / base.label}")
    with open(out_root / base.label / "summary.json") as fh:
        summary = json.load(fh)
    if summary.get("failures"):
        print(f"{len(summary['failures'])} grid cell(s) failed; "
              "see summary.json")
        return 3
    unmet = check_assertions(summary, assertions)
    if unmet:
        raise AssertionError("study assertions failed: " + "; ".join(unmet))
    if assertions:
        print(f"all {len(assertions)} study assertions hold")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="romilab", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output path"):
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, repeatable")
        sp.add_argument("--seed", type=int, help="root seed")
        sp.add_argument("--out", help=out_help)

    sp = sub.add_parser("gen-data", help="generate a behavior dataset")
    common(sp, "buffer output path (default dataset.bin)")
    sp.add_argument("--layout", help="umaze | medium | large | layout file")
    sp.add_argument("--kind", choices=("grid", "continuous"))
    sp.add_argument("--reward-mode", dest="reward_mode",
                    choices=("sparse", "dense"))
    sp.add_argument("--n", type=int, help="number of transitions")
    sp.add_argument("--csv", help="also export a csv copy here")
    sp.set_defaults(func=_cmd_gen_data)

    sp = sub.add_parser("fit-model", help="fit a dynamics model")
    common(sp, "model output path (default model.bin)")
    sp.add_argument("--data", required=True, help="buffer file")
    sp.add_argument("--direction", choices=("reverse", "forward"))
    sp.add_argument("--model", choices=("tabular", "ensemble"))
    sp.set_defaults(func=_cmd_fit_model)

    sp = sub.add_parser("imagine", help="run anchored model rollouts")
    common(sp, "imagined buffer output path (default imagined.bin)")
    sp.add_argument("--data", required=True, help="anchor buffer file")
    sp.add_argument("--model", required=True, help="model checkpoint")
    sp.add_argument("--direction", choices=("reverse", "forward"))
    sp.add_argument("--policy",
                    choices=("uniform", "empirical", "cvae", "rbc"))
    sp.add_argument("--horizon", type=int)
    sp.set_defaults(func=_cmd_imagine)

    sp = sub.add_parser("train", help="train the conservative learner")
    common(sp, "policy table output path (default qtable.json)")
    sp.add_argument("--data", required=True, help="env buffer file")
    sp.add_argument("--imagined", help="imagined buffer file")
    sp.add_argument("--eta", type=float, help="model-data mixing ratio")
    sp.add_argument("--algo", choices=("bcq_discrete", "cql_discrete"))
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("eval", help="evaluate a saved policy table")
    common(sp, "eval csv output path (default eval.csv)")
    sp.add_argument("--data", required=True, help="env buffer file (for ATD)")
    sp.add_argument("--qtable", required=True, help="policy table file")
    sp.add_argument("--layout")
    sp.add_argument("--kind", choices=("grid", "continuous"))
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("pipeline", help="run all stages for one config")
    common(sp, "output root (default $ROMI_LAB_OUT or ./runs)")
    sp.set_defaults(func=_cmd_pipeline)

    sp = sub.add_parser("ablate", help="run an ablation study")
    common(sp, "output root (default $ROMI_LAB_OUT or ./runs)")
    sp.add_argument("--preset", help="|".join(_preset_names()))
    sp.add_argument("--jobs", type=int, default=1,
                    help="parallel (arm, seed) workers")
    sp.set_defaults(func=_cmd_ablate)
    return p


def _preset_names():
    from .pipeline import PRESETS

    return sorted(PRESETS)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ChecksumError, AssertionError) as exc:
        print(f"assertion failure: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:
        if "hash mismatch" in str(exc):
            print(f"assertion failure: {exc}", file=sys.stderr)
            return 4
        print(f"stage failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
