"""Full method comparison on the Gaussian toy; writes report.csv and reference.csv.

    python3 scripts/run_toy_sweep.py [--config configs/toy.cfg]
"""
import argparse
import logging
from pathlib import Path

from dfunlearn.config import load_config
from dfunlearn.evaluation import assemble_report
from dfunlearn.experiment import Experiment, read_metrics

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=ROOT / "configs" / "toy.cfg")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    exp = Experiment(load_config(args.config))
    runs, failures = exp.sweep()
    refs = [read_metrics(p) for p in sorted(exp.out.glob("*.metrics.csv"))
            if p.name.split("_f")[0] in ("Original", "Retrain")]
    print(f"{'method':<8} {'A_f':>12} {'A_r':>12} {'MIA_I':>7} {'MIA_II':>7} {'AIN':>6}")
    for row in assemble_report(refs) + assemble_report(runs):
        print(row.table_row())
    for f in failures:
        print("FAILED", *f)
    print(f"\nfiles in {exp.out}")


if __name__ == "__main__":
    main()
