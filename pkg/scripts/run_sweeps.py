#!/usr/bin/env python3
"""Run the rollout-length and eta-mixing sweeps on the umaze grid.

Each sweep is a shipped ablation preset (tabular reverse model, empirical
rollout policy) and writes merged eval.csv, summary.json, and a line figure
per sweep under the output root.

Usage:
    python3 scripts/run_sweeps.py [--jobs 4] [--out runs]
    python3 scripts/run_sweeps.py --preset umaze-eta-sweep
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from romilab.pipeline import default_out_dir, load_preset, run_ablation_grid
from romilab.plots import plot_sweep

SWEEPS = {
    "umaze-rollout-length": ("horizon", lambda r: r.horizon),
    "umaze-eta-sweep": ("eta", lambda r: r.eta),
}


def run_sweep(name, jobs, out):
    base, arms, delta_base, _ = load_preset(name)
    if out:
        base.out_dir = out
    reports = run_ablation_grid(base, arms, jobs=jobs, delta_base=delta_base)
    x_field, x_of = SWEEPS[name]
    rows = {}
    for r in reports:
        rows.setdefault(r.arm, {"x": x_of(r), "succ": [], "score": []})
        rows[r.arm]["succ"].append(r.success_rate)
        rows[r.arm]["score"].append(r.normalized_score)
    agg = [{x_field: v["x"], "success_rate": float(np.mean(v["succ"])),
            "normalized_score": float(np.mean(v["score"]))}
           for v in rows.values()]
    fig_path = default_out_dir(base.out_dir) / base.label / "sweep.svg"
    plot_sweep(agg, x_field, ("success_rate",), fig_path, title=name)
    print(f"{name}:")
    best = max(row["normalized_score"] for row in agg)
    for row in sorted(agg, key=lambda d: d[x_field]):
        mark = " *best" if row["normalized_score"] == best else ""
        print(f"  {x_field}={row[x_field]:<6g} success {row['success_rate']:.2f} "
              f"score {row['normalized_score']:.1f}{mark}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default=None)
    ap.add_argument("--preset", choices=sorted(SWEEPS), default=None)
    args = ap.parse_args()
    for name in ([args.preset] if args.preset else sorted(SWEEPS)):
        run_sweep(name, args.jobs, args.out)


if __name__ == "__main__":
    main()
