#!/usr/bin/env python3
"""Run the umaze direction study: base vs reverse vs forward imagination.

Reproduces the headline comparison: all three arms share each seed's dataset,
ensemble dynamics models are fit per direction, imagined transitions are mixed
into conservative Q-learning, and the trained policies are scored on success,
collisions, normalized score, and trajectory discrepancy.

Usage:
    python3 scripts/run_direction_study.py [--jobs 5] [--out runs]
    python3 scripts/run_direction_study.py --seeds 0 1 2   # subset
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from romilab.pipeline import check_assertions, load_preset, run_ablation_grid


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default=None)
    ap.add_argument("--seeds", type=int, nargs="+", default=None)
    args = ap.parse_args()

    base, arms, delta_base, assertions = load_preset("umaze-direction-study")
    if args.seeds is not None:
        base.seeds = tuple(args.seeds)
    if args.out:
        base.out_dir = args.out
    reports = run_ablation_grid(base, arms, jobs=args.jobs,
                                delta_base=delta_base)
    by_arm = {}
    for r in reports:
        by_arm.setdefault(r.arm, []).append(r)
    import numpy as np

    print(f"{'arm':8s} {'success':>8s} {'collide':>8s} {'score':>9s} {'atd':>7s}")
    summary = {}
    for arm, rows in by_arm.items():
        summary[arm] = {
            "success_rate": float(np.mean([r.success_rate for r in rows])),
            "collision_rate": float(np.mean([r.collision_rate for r in rows])),
            "normalized_score": float(np.mean([r.normalized_score for r in rows])),
            "atd_mean": float(np.mean([r.atd_mean for r in rows])),
        }
        s = summary[arm]
        print(f"{arm:8s} {s['success_rate']:8.2f} {s['collision_rate']:8.2f} "
              f"{s['normalized_score']:9.1f} {s['atd_mean']:7.3f}")
    unmet = check_assertions(summary, assertions)
    for msg in unmet:
        print(f"ASSERTION FAILED: {msg}")
    if not unmet:
        print(f"all {len(assertions)} study assertions hold")
    return 1 if unmet else 0


if __name__ == "__main__":
    sys.exit(main())
