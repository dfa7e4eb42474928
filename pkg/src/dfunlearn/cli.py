"""``dfunlearn`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
The ``ULRN_OUT`` environment variable overrides the config's ``output_dir``.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import checkpoint as ckio
from .config import load_config
from .engine import METHODS
from .errors import ConfigError, ContractError, FormatError
from .evaluation import RunMetrics
from .experiment import Experiment

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("dfunlearn")


def _parse_forget(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"--forget expects comma-separated class indices, got {text!r}") from None


def _forget_arg(args, exp: Experiment) -> tuple[int, ...]:
    return _parse_forget(args.forget) if args.forget is not None else exp.cfg.forget_sets[0]


def cmd_train_teacher(args) -> int:
    exp = Experiment(load_config(args.config))
    teacher = exp.train_teacher()
    print(f"teacher: {exp.teacher_path} train_acc={teacher.meta['train_acc']:.2f} "
          f"test_acc={teacher.meta.get('test_acc', float('nan')):.2f}")
    return EXIT_OK


def cmd_unlearn(args) -> int:
    exp = Experiment(load_config(args.config))
    if args.method not in METHODS:
        raise ConfigError(f"unknown method {args.method!r}; valid methods: {', '.join(METHODS)}")
    forget = _forget_arg(args, exp)
    exp.split(forget)
    if not exp.teacher_path.exists():
        raise ConfigError(f"teacher checkpoint not found: {exp.teacher_path} "
                          f"(run train-teacher first)")
    seed = args.seed if args.seed is not None else exp.cfg.seeds[0]
    exp.unlearn(args.method, forget, seed)
    print(f"student: {exp.student_path(args.method, forget, seed)}")
    print(f"steps: {exp.out / f'{args.method}_steps.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    exp = Experiment(load_config(args.config))
    path = Path(args.student)
    if not path.is_file():
        raise ConfigError(f"student checkpoint not found: {path}")
    model = ckio.load(path)
    forget = _forget_arg(args, exp)
    seed = args.seed
    if seed is None:
        seed = int(model.meta["seed"]) if "seed" in model.meta else exp.cfg.seeds[0]
    method = args.label or path.stem.split("_f")[0]
    m = exp.evaluate(model, method, forget, seed)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(RunMetrics.CSV_COLUMNS)
    w.writerow(m.csv_row())
    return EXIT_OK


def cmd_sweep(args) -> int:
    exp = Experiment(load_config(args.config))
    runs, failures = exp.sweep()
    print((exp.out / "report.csv").read_text(), end="")
    for method, forget, seed, err in failures:
        print(f"FAILED {method} f{forget} s{seed}: {err}", file=sys.stderr)
    return EXIT_RUNTIME if failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfunlearn",
                                description="Data-free class unlearning experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-teacher", help="train the original model")
    t.add_argument("config")
    t.set_defaults(func=cmd_train_teacher)

    u = sub.add_parser("unlearn", help="distill a student that forgets some classes")
    u.add_argument("config")
    u.add_argument("--method", required=True, help=f"one of {', '.join(METHODS)}")
    u.add_argument("--forget", help='classes to forget, e.g. "3" or "1,4"')
    u.add_argument("--seed", type=int)
    u.set_defaults(func=cmd_unlearn)

    e = sub.add_parser("eval", help="score a checkpoint against the gold retrain")
    e.add_argument("config")
    e.add_argument("--student", required=True)
    e.add_argument("--forget")
    e.add_argument("--seed", type=int)
    e.add_argument("--label", help="method name for the report row")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="every method x seed x forget set, aggregated")
    s.add_argument("config")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
