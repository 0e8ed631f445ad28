"""Simulate one day under all three policies and print a cost breakdown.

Usage:
    python scripts/day_demo.py [--seed N] [--horizon 288] [--out DIR]

With --out, per-slot records for the joint policy are written as CSV.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from emsched.controller import design_params
from emsched.model import BatteryParams, CostModel, GridParams, ModelBundle, Weights
from emsched.scenario import StageProfile, generate_trace
from emsched.simulator import POLICIES, run_policy, write_records


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--horizon", type=int, default=288)
    parser.add_argument("--out", type=Path, default=None)
    args = parser.parse_args()

    bundle = ModelBundle(
        battery=BatteryParams(),
        grid=GridParams(),
        costs=CostModel.quadratic(),
        weights=Weights(),
        horizon=args.horizon,
    )
    a_o, v_max = design_params(
        bundle.battery, bundle.grid, bundle.costs, bundle.weights, bundle.horizon
    )
    print(f"design: A_o={a_o:.4f}  V_max={v_max:.4f}")

    trace = generate_trace(StageProfile(), args.horizon, args.seed)
    print(f"trace seed {args.seed}: {trace.horizon} slots of {trace.slot_minutes} min")
    print(f"{'policy':13s} {'total':>10s} {'grid J':>10s} {'entry':>9s} "
          f"{'usage':>9s} {'delay':>9s} {'avg d':>7s} {'drain':>5s}")
    for policy in POLICIES:
        s = run_policy(trace, bundle, policy)
        print(f"{policy:13s} {s.total:10.6f} {s.j_bar:10.6f} {s.entry_bar:9.6f} "
              f"{s.usage_cost:9.6f} {s.delay_cost:9.6f} {s.delay_avg:7.3f} {s.drain_slots:5d}")
        if args.out is not None and policy == "joint":
            args.out.mkdir(parents=True, exist_ok=True)
            write_records(args.out / f"day_seed{args.seed}.csv", s.records)
            print(f"  records -> {args.out / f'day_seed{args.seed}.csv'}")


if __name__ == "__main__":
    main()
