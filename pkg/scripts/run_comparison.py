#!/usr/bin/env python3
"""Train the compared variants on a synthetic corpus and write daily MAE,
timeliness and saved-days tables.

    python3 scripts/run_comparison.py --out runs/comparison
    python3 scripts/run_comparison.py --n-cases 400 --seeds 0 --epochs 5 --out /tmp/quick
"""

import argparse
import dataclasses
import logging
from pathlib import Path

import numpy as np

from condlstm import evaluation as E
from condlstm.experiments import COMPARED, ComparisonConfig, run_comparison


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-cases", type=int, default=2000)
    ap.add_argument("--corpus-seed", type=int, default=0)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--variants", default=",".join(COMPARED))
    ap.add_argument("--epochs", type=int, default=None, help="override max_epochs")
    ap.add_argument("--out", default="runs/comparison")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = ComparisonConfig(
        n_cases=args.n_cases,
        corpus_seed=args.corpus_seed,
        seeds=tuple(int(s) for s in args.seeds.split(",")),
        variants=tuple(args.variants.split(",")),
    )
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, max_epochs=args.epochs))
    res = run_comparison(cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves = {v: {d: float(m) for d, m in enumerate(res.mae_curve(v), start=1)} for v in cfg.variants}
    E.write_mae_csv(out / "mae_by_day.csv", curves)
    test = res.splits.test
    for run in res.runs:
        log_ = E.PredictionLog.from_matrix(test, run.predictions)
        tag = f"{run.variant}_seed{run.seed}"
        E.write_timeliness_csv(out / f"timeliness_{tag}.csv", [E.timeliness_epsilon(log_, c) for c in (0.9, 0.95)])
        E.write_saved_days_csv(out / f"saved_days_{tag}.csv", E.saved_days_report(log_, test))

    print(f"{'variant':22s} {'d1':>9s} {'d7':>9s} {'d14':>9s} {'d28':>9s}  first day eps90<=0.2")
    for v in cfg.variants:
        m = res.mae_curve(v)
        print(f"{v:22s} {m[0]:9.0f} {m[6]:9.0f} {m[13]:9.0f} {m[27]:9.0f}  {res.first_days(v)}")
    print(f"natural wait (0.2, 0.9) on the test split: {E.natural_wait(test, 0.2, 0.9)}")
    print(f"mean test total: {np.mean([c.total_donations for c in test]):.0f}")


if __name__ == "__main__":
    main()
