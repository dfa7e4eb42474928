"""Per-step synthesis diagnostics for the filtering methods.

For each method and seed this prints, over the last fifth of training, the
mean number of synthetic samples the teacher assigns to forgetting classes,
how many were filtered out, and the retaining-class batch entropy.  Step
logs go to ``<out>/diag_<method>_s<seed>.csv`` and a sample of final
synthetic points (features + teacher probabilities) to
``<out>/synth_<method>_s<seed>.csv``.

    python3 scripts/drift_diagnostics.py [--config configs/toy.cfg] [--methods DFKD,GKT,IS,PF,ISPF]
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from dfunlearn.config import load_config
from dfunlearn.engine import StepLog, dump_synthetic, run_unlearning
from dfunlearn.experiment import Experiment

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=ROOT / "configs" / "toy.cfg")
    ap.add_argument("--methods", default="DFKD,GKT,IS,PF,ISPF")
    ap.add_argument("--samples", type=int, default=512)
    args = ap.parse_args()

    exp = Experiment(load_config(args.config))
    forget = exp.cfg.forget_sets[0]
    split = exp.split(forget)
    teacher = exp.teacher()
    exp.out.mkdir(parents=True, exist_ok=True)
    print(f"{'method':<7} seed  forget_synth  filtered  H_B")
    for method in args.methods.split(","):
        for seed in exp.cfg.seeds:
            res = run_unlearning(teacher, exp.cfg.train_config(method, seed, exp.x_range()), split)
            with (exp.out / f"diag_{method}_s{seed}.csv").open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(StepLog.CSV_COLUMNS + tuple(f"count_{k}" for k in range(split.num_classes)))
                for e in res.logs:
                    w.writerow(e.csv_row() + [str(c) for c in e.class_counts])
            synth = dump_synthetic(res.generator, teacher, args.samples, seed)
            np.savetxt(exp.out / f"synth_{method}_s{seed}.csv", synth, delimiter=",", fmt="%.6g")
            tail = res.logs[-max(1, len(res.logs) // 5):]
            mean = lambda f: np.mean([getattr(e, f) for e in tail])
            print(f"{method:<7} {seed:>4}  {mean('n_forget_synth'):12.1f}  {mean('n_filtered'):8.1f}"
                  f"  {mean('H_B'):6.2f}")


if __name__ == "__main__":
    main()
