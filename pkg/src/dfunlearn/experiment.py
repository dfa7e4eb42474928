"""File-backed experiment pipeline shared by the CLI and the scripts.

Every artifact lives under the output directory:

* ``teacher.ulrn``: the original model.
* ``gold_<hash>.ulrn``: retrain-from-scratch reference per forget set, keyed
  by a hash of the data/teacher settings and the forget classes.
* ``attack_<hash>_s<seed>.ulrn``: shadow-model membership attack per seed.
* ``<method>_f<classes>_s<seed>.ulrn``: unlearned students, with per-run
  ``.metrics.csv`` files that double as completion markers for sweeps.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import checkpoint as ckio
from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .data import Dataset, load_idx, make_blobs, restrict, with_train_stats
from .engine import StepLog, retrain_gold, run_unlearning, train_teacher
from .errors import ConfigError, ContractError
from .evaluation import (RunMetrics, accuracy, ain, assemble_report, attack_f1,
                         fit_shadow_attack, mia_i, per_class_accuracy, report_csv)
from .losses import LabelSplit
from .models import ClassifierSpec

log = logging.getLogger(__name__)

RUNS_COLUMNS = ("kind", "file", "seed", "forget", "train_acc", "test_acc", "A_f", "A_r",
                "config_hash")
FAILURE_COLUMNS = ("method", "forget", "seed", "error")
REFERENCE_NAMES = ("Original", "Retrain")


def forget_tag(forget: Sequence[int]) -> str:
    return "-".join(str(c) for c in sorted(forget)) or "none"


def run_name(method: str, forget: Sequence[int], seed: int) -> str:
    return f"{method}_f{forget_tag(forget)}_s{seed}"


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _append_csv(path: Path, header: Sequence[str], row: Sequence[str]) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(header)
        w.writerow(row)


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _num(v: float) -> str:
    return "nan" if v != v else repr(float(v))


@dataclass
class Experiment:
    """Lazily materialised data and checkpoints for one config."""

    cfg: ExperimentConfig

    def __post_init__(self):
        self.out = self.cfg.output_dir
        self._data: tuple[Dataset, Dataset] | None = None
        self._teacher: Checkpoint | None = None

    # -- data ------------------------------------------------------------------

    @property
    def data(self) -> tuple[Dataset, Dataset]:
        if self._data is None:
            self._data = load_data(self.cfg)
        return self._data

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def spec(self) -> ClassifierSpec:
        train, test = self.data
        k = max(train.num_classes, test.num_classes)
        if self.cfg.get("data", "source") == "blobs":
            k = self.cfg.get("data", "num_classes")
        return ClassifierSpec(train.dim, self.cfg.get("teacher", "hidden"), k)

    def split(self, forget: Sequence[int]) -> LabelSplit:
        return LabelSplit(self.num_classes, tuple(forget))

    # -- checkpoints -------------------------------------------------------------

    @property
    def teacher_path(self) -> Path:
        return self.out / "teacher.ulrn"

    def train_teacher(self) -> Checkpoint:
        train, test = self.data
        teacher = train_teacher(train, self.spec, self.cfg.teacher_config(), test)
        ckio.save(teacher, self.teacher_path)
        self._append_run("teacher", self.teacher_path, self.cfg.get("teacher", "seed"), "",
                         teacher.meta.get("train_acc", math.nan),
                         teacher.meta.get("test_acc", math.nan))
        # downstream work always sees the f32-rounded weights, fresh or resumed
        self._teacher = ckio.load(self.teacher_path)
        return self._teacher

    def teacher(self) -> Checkpoint:
        if self._teacher is None:
            if self.teacher_path.exists():
                teacher = ckio.load(self.teacher_path)
                check_same_spec(teacher, self.spec, "teacher", self.teacher_path)
                self._teacher = teacher
            else:
                log.info("no teacher at %s; training one", self.teacher_path)
                self.train_teacher()
        return self._teacher

    def gold_hash(self, forget: Sequence[int]) -> str:
        return self.cfg.hash(("data", "teacher"), extra=f"forget={forget_tag(forget)}")

    def gold_path(self, forget: Sequence[int]) -> Path:
        return self.out / f"gold_{self.gold_hash(forget)}.ulrn"

    def gold(self, forget: Sequence[int]) -> Checkpoint:
        path = self.gold_path(forget)
        if path.exists():
            gold = ckio.load(path)
            check_same_spec(gold, self.spec, "gold retrain", path)
            return gold
        train, test = self.data
        gold = retrain_gold(train, self.split(forget), self.spec, self.cfg.teacher_config(), test)
        ckio.save(gold, path)
        self._append_run("gold", path, self.cfg.get("teacher", "seed"), forget_tag(forget),
                         gold.meta.get("train_acc", math.nan), gold.meta.get("test_acc", math.nan))
        return ckio.load(path)

    def attack_path(self, seed: int) -> Path:
        h = self.cfg.hash(("data", "teacher", "eval"))
        return self.out / f"attack_{h}_s{seed}.ulrn"

    def attack(self, seed: int) -> Checkpoint | None:
        if not self.cfg.get("eval", "mia_ii"):
            return None
        path = self.attack_path(seed)
        if path.exists():
            return ckio.load(path)
        train, test = self.data
        att = fit_shadow_attack(self.spec, train, test, self.cfg.teacher_config(),
                                self.cfg.shadow_config(), seed)
        ckio.save(att, path)
        return ckio.load(path)

    def _append_run(self, kind: str, path: Path, seed: int, forget: str, train_acc: float,
                    test_acc: float, a_f: float = math.nan, a_r: float = math.nan) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        _append_csv(self.out / "runs.csv", RUNS_COLUMNS,
                    [kind, path.name, str(seed), forget, _num(train_acc), _num(test_acc),
                     _num(a_f), _num(a_r), self.cfg.hash()])

    # -- unlearning ---------------------------------------------------------------

    def x_range(self) -> tuple[float, float]:
        return self.data[0].value_range

    def student_path(self, method: str, forget: Sequence[int], seed: int) -> Path:
        return self.out / f"{run_name(method, forget, seed)}.ulrn"

    def unlearn(self, method: str, forget: Sequence[int], seed: int,
                steps_path: Path | None = None) -> Checkpoint:
        """Run one unlearning job, writing the student and its step log."""
        split = self.split(forget)
        tcfg = self.cfg.train_config(method, seed, self.x_range())
        teacher = self.teacher()
        steps_path = steps_path or self.out / f"{method}_steps.csv"
        self.out.mkdir(parents=True, exist_ok=True)
        tmp = steps_path.with_suffix(".csv.tmp")
        with tmp.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(StepLog.CSV_COLUMNS)
            result = run_unlearning(teacher, tcfg, split, on_step=lambda e: w.writerow(e.csv_row()))
        tmp.replace(steps_path)
        student = result.student
        student.meta["forget_count"] = float(len(split.forget))
        path = self.student_path(method, forget, seed)
        ckio.save(student, path)
        _, test = self.data
        self._append_run("unlearn", path, seed, forget_tag(forget), math.nan, math.nan,
                         accuracy(student, test, split.forget),
                         accuracy(student, test, split.retain))
        return ckio.load(path)

    # -- evaluation -----------------------------------------------------------------

    def evaluate(self, model: Checkpoint, method: str, forget: Sequence[int], seed: int,
                 attack: Checkpoint | None = None) -> RunMetrics:
        split = self.split(forget)
        if not split.forget:
            raise ConfigError("evaluation needs at least one forgetting class")
        check_same_spec(model, self.spec, method)
        train, test = self.data
        gold = self.gold(forget)
        teacher = self.teacher()
        d_f_train = restrict(train, split.forget)
        d_r_train = restrict(train, split.retain)
        d_r_test = restrict(test, split.retain)
        if attack is None:
            attack = self.attack(seed)
        return RunMetrics(
            method=method, seed=seed, forget=forget_tag(forget),
            A_f=accuracy(model, test, split.forget),
            A_r=accuracy(model, test, split.retain),
            MIA_I=mia_i(model, d_f_train, d_r_train, d_r_test),
            MIA_II=attack_f1(model, attack, train, test, seed) if attack is not None else math.nan,
            AIN=ain(model, gold, teacher, train, test, split, self.cfg.relearn_config(seed)),
            per_class=per_class_accuracy(model, test, self.num_classes))

    # -- sweep --------------------------------------------------------------------------

    def metrics_path(self, name: str) -> Path:
        return self.out / f"{name}.metrics.csv"

    def sweep(self) -> tuple[list[RunMetrics], list[tuple[str, str, int, str]]]:
        """Every (forget set, seed, method) run; completed runs are skipped.

        Returns the collected per-run metrics and the failures.  Failures are
        written to ``failures.csv`` and do not stop the sweep.
        """
        self.out.mkdir(parents=True, exist_ok=True)
        self.teacher()
        failures: list[tuple[str, str, int, str]] = []
        runs: list[RunMetrics] = []
        refs: list[RunMetrics] = []
        for forget in self.cfg.forget_sets:
            self.gold(forget)
        for forget in self.cfg.forget_sets:
            for seed in self.cfg.seeds:
                for method in REFERENCE_NAMES + tuple(self.cfg.methods):
                    name = run_name(method, forget, seed)
                    mpath = self.metrics_path(name)
                    try:
                        if not mpath.exists():
                            log.info("running %s", name)
                            self._one_run(method, forget, seed, mpath)
                        m = read_metrics(mpath)
                    except Exception as exc:  # recorded per row; the sweep continues
                        log.error("run %s failed: %s", name, exc)
                        log.debug("%s", traceback.format_exc())
                        failures.append((method, forget_tag(forget), seed,
                                         f"{type(exc).__name__}: {exc}"))
                        continue
                    (refs if method in REFERENCE_NAMES else runs).append(m)

        multi = len(self.cfg.forget_sets) > 1
        _write_atomic(self.out / "report.csv", report_csv(assemble_report(_label(runs, multi))))
        _write_atomic(self.out / "reference.csv", report_csv(assemble_report(_label(refs, multi))))
        fail_path = self.out / "failures.csv"
        if failures:
            _write_atomic(fail_path, _csv_text(FAILURE_COLUMNS, [
                [m, f, str(s), e.replace("\n", " ").replace(",", ";")] for m, f, s, e in failures]))
        elif fail_path.exists():
            fail_path.unlink()
        return runs, failures

    def _one_run(self, method: str, forget: Sequence[int], seed: int, mpath: Path) -> None:
        if method == "Original":
            model = self.teacher()
        elif method == "Retrain":
            model = self.gold(forget)
        else:
            name = run_name(method, forget, seed)
            self.unlearn(method, forget, seed, self.out / f"{name}_steps.csv")
            model = ckio.load(self.student_path(method, forget, seed))
        m = self.evaluate(model, method, forget, seed)
        write_metrics(mpath, m)


def _label(runs: list[RunMetrics], multi: bool) -> list[RunMetrics]:
    if not multi:
        return runs
    return [RunMetrics(**{**r.__dict__, "method": f"{r.method}@f{r.forget}"}) for r in runs]


METRIC_FILE_COLUMNS = RunMetrics.CSV_COLUMNS + ("per_class",)


def write_metrics(path: Path, m: RunMetrics) -> None:
    """Full-precision per-run record (the report is rebuilt from these)."""
    row = [m.method, m.forget, str(m.seed)] + [_num(v) for v in (m.A_f, m.A_r, m.MIA_I,
                                                                 m.MIA_II, m.AIN)]
    row.append(" ".join(_num(v) for v in m.per_class))
    _write_atomic(path, _csv_text(METRIC_FILE_COLUMNS, [row]))


def read_metrics(path: Path) -> RunMetrics:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) != 2 or tuple(rows[0]) != METRIC_FILE_COLUMNS:
        raise ConfigError(f"{path}: not a metrics file")
    method, forget, seed, *vals, per_class = rows[1]
    a_f, a_r, m1, m2, a = (float(v) for v in vals)
    return RunMetrics(method, int(seed), a_f, a_r, m1, m2, a,
                      [float(v) for v in per_class.split()], forget)


def check_same_spec(ckpt: Checkpoint, spec: ClassifierSpec, what: str, path=None) -> None:
    where = f" ({path})" if path else ""
    if ckpt.is_generator:
        raise ContractError(f"{what}{where} is a generator checkpoint, expected a classifier")
    if ckpt.spec != spec:
        raise ContractError(f"{what}{where} has layer dims {list(ckpt.spec.layer_dims)}, "
                            f"config expects {list(spec.layer_dims)}")


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.values["data"]
    if d["source"] == "blobs":
        train, test = make_blobs(cfg.blob_spec())
    else:
        train = load_idx(d["train_images"], d["train_labels"], "train")
        test = load_idx(d["test_images"], d["test_labels"], "test")
        train, test = with_train_stats(train, test)
    if d["normalize"]:
        train, test = train.normalized(), test.normalized()
    return train, test
