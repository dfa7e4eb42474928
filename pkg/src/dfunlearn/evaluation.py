"""Unlearning metrics: accuracies, anamnesis index, two membership attacks,
and the seed-aggregated report."""
from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import nncore as nn
from .checkpoint import Checkpoint
from .data import Dataset
from .engine import SupervisedConfig, cross_entropy, fit_classifier
from .errors import ConfigError, ContractError, UndefinedMetricError
from .losses import LabelSplit
from .models import ClassifierSpec, classifier_logits, init_network, make_rng

log = logging.getLogger(__name__)


class DegenerateMetricWarning(UserWarning):
    pass


def accuracy(model: Checkpoint, dataset: Dataset, classes: Iterable[int] | None = None) -> float:
    """Percent of samples (optionally restricted to ``classes``) predicted correctly."""
    ds = dataset if classes is None else _subset(dataset, classes)
    return float(np.mean(model.predict(ds.x) == ds.y) * 100.0)


def _subset(dataset: Dataset, classes: Iterable[int]) -> Dataset:
    classes = list(classes)
    mask = np.isin(dataset.y, classes)
    if not mask.any():
        raise UndefinedMetricError(f"no samples with labels in {sorted(classes)}")
    return dataset.subset(mask)


def per_class_accuracy(model: Checkpoint, dataset: Dataset, num_classes: int) -> list[float]:
    pred = model.predict(dataset.x)
    out = []
    for c in range(num_classes):
        m = dataset.y == c
        out.append(float(np.mean(pred[m] == c) * 100.0) if m.any() else float("nan"))
    return out


def per_sample_loss(model: Checkpoint, dataset: Dataset) -> np.ndarray:
    """Cross-entropy of each sample under ``model``."""
    logits = model.logits(dataset.x)
    rows = np.arange(len(dataset))
    own = logits[rows, dataset.y][:, None]
    top = logits.max(axis=1, keepdims=True)
    general = np.log(np.exp(logits - top).sum(axis=1)) + top[:, 0] - own[:, 0]
    # log1p branch keeps resolution when the true class dominates (loss << 1e-16)
    others = np.exp(np.minimum(logits - own, 0.0))
    others[rows, dataset.y] = 0.0
    precise = np.log1p(others.sum(axis=1))
    return np.where(own[:, 0] >= top[:, 0], precise, general)


# -- anamnesis index ---------------------------------------------------------

@dataclass(frozen=True)
class RelearnConfig:
    lr: float = 0.01
    max_steps: int = 500
    margin: float = 0.05
    eval_every: int = 1
    batch_size: int = 32
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.margin < 1:
            raise ConfigError(f"relearn margin must lie in (0, 1), got {self.margin}")
        if self.max_steps < 1 or self.eval_every < 1 or self.batch_size < 1:
            raise ConfigError(f"invalid relearn config: {self}")
        if not self.lr > 0:
            raise ConfigError(f"relearn lr must be positive, got {self.lr}")


def relearn_time(model: Checkpoint, train: Dataset, forget_test: Dataset, target_acc: float,
                 cfg: RelearnConfig) -> tuple[int, bool]:
    """Fine-tuning steps until forgetting accuracy reaches ``target_acc``.

    Returns ``(steps, censored)``.  A model already at target counts as 1
    step; hitting ``max_steps`` returns ``max_steps`` with ``censored=True``.
    """
    work = model.copy()

    def reached() -> bool:
        return accuracy(work, forget_test) >= target_acc

    if reached():
        return 1, False
    result = {"steps": None}

    def on_step(step: int) -> bool:
        if step % cfg.eval_every == 0 and reached():
            result["steps"] = step
            return True
        return False

    sup = SupervisedConfig(epochs=1, lr=cfg.lr, batch_size=cfg.batch_size, momentum=cfg.momentum)
    fit_classifier(work.params, work.spec, train, sup, make_rng(cfg.seed, 20),
                   max_steps=cfg.max_steps, on_step=on_step)
    if result["steps"] is None:
        log.info("relearning censored at %d steps", cfg.max_steps)
        return cfg.max_steps, True
    return result["steps"], False


def ain(unlearned: Checkpoint, retrained: Checkpoint, original: Checkpoint,
        train: Dataset, test: Dataset, split: LabelSplit, cfg: RelearnConfig) -> float:
    """Relearning time of ``unlearned`` over that of ``retrained``."""
    for name, ck in (("unlearned", unlearned), ("retrained", retrained)):
        if ck.spec != original.spec:
            raise ContractError(f"{name} spec {ck.spec} differs from original {original.spec}")
    forget_test = _subset(test, split.forget)
    base = accuracy(original, forget_test)
    if base == 0:
        raise UndefinedMetricError("original model has zero forgetting accuracy")
    target = (1.0 - cfg.margin) * base
    rt_u, _ = relearn_time(unlearned, train, forget_test, target, cfg)
    rt_r, _ = relearn_time(retrained, train, forget_test, target, cfg)
    return rt_u / rt_r


# -- MIA-I: loss-threshold attack --------------------------------------------

def fit_threshold(member_scores: np.ndarray, nonmember_scores: np.ndarray) -> float | None:
    """Threshold ``thr`` (member iff score <= thr) maximizing balanced accuracy.

    Candidates are the observed scores, so the fit commutes with any strictly
    increasing transform.  Returns None when every score is identical.
    """
    mem = np.sort(np.asarray(member_scores, dtype=np.float64))
    non = np.sort(np.asarray(nonmember_scores, dtype=np.float64))
    cand = np.unique(np.concatenate([mem, non]))
    if cand.size < 2:
        return None
    tpr = np.searchsorted(mem, cand, side="right") / mem.size
    tnr = 1.0 - np.searchsorted(non, cand, side="right") / non.size
    return float(cand[int(np.argmax(0.5 * (tpr + tnr)))])


def mia_i(model: Checkpoint, d_f_train: Dataset, d_r_train: Dataset, d_r_test: Dataset) -> float:
    """Percent of forgetting training samples the attack calls non-members."""
    if min(len(d_f_train), len(d_r_train), len(d_r_test)) == 0:
        raise UndefinedMetricError("membership attack needs nonempty splits")
    thr = fit_threshold(per_sample_loss(model, d_r_train), per_sample_loss(model, d_r_test))
    if thr is None:
        warnings.warn("all membership scores are equal; MIA-I defaults to 50", DegenerateMetricWarning)
        return 50.0
    return float(np.mean(per_sample_loss(model, d_f_train) > thr) * 100.0)


# -- MIA-II: shadow-model attack ---------------------------------------------

@dataclass(frozen=True)
class ShadowConfig:
    n_shadow: int = 4
    attack_hidden: int = 32
    attack_epochs: int = 40
    attack_lr: float = 1e-2
    attack_batch: int = 64
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.n_shadow < 2:
            raise ConfigError(f"MIA-II needs at least 2 shadow models, got {self.n_shadow}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")


def _attack_features(model: Checkpoint, ds: Dataset) -> np.ndarray:
    probs = model.proba(ds.x)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(ds)), ds.y] = 1.0
    return np.hstack([probs, onehot])


def _train_attack(feats: np.ndarray, labels: np.ndarray, cfg: ShadowConfig,
                  rng: np.random.Generator) -> Checkpoint:
    spec = ClassifierSpec(feats.shape[1], (cfg.attack_hidden,), 2)
    order = rng.permutation(labels.size)
    n_val = max(1, int(round(cfg.val_fraction * labels.size)))
    val, fit = order[:n_val], order[n_val:]
    train_ds = Dataset(feats[fit], labels[fit], "attack")
    val_ds = Dataset(feats[val], labels[val], "attack-val")
    params = init_network(spec, rng)
    opt = nn.Adam(params, cfg.attack_lr)
    best, best_acc = params.copy(), -1.0
    for _ in range(cfg.attack_epochs):
        perm = rng.permutation(len(train_ds))
        for start in range(0, perm.size, cfg.attack_batch):
            idx = perm[start:start + cfg.attack_batch]
            params.zero_grads()
            loss = cross_entropy(classifier_logits(params, spec, train_ds.x[idx]), train_ds.y[idx])
            nn.backward(loss)
            opt.step()
        acc = float(np.mean(Checkpoint(spec, params).predict(val_ds.x) == val_ds.y))
        if acc > best_acc:
            best, best_acc = params.copy(), acc
    return Checkpoint(spec, best)


def f1_score(pred: np.ndarray, truth: np.ndarray) -> float:
    tp = float(np.sum((pred == 1) & (truth == 1)))
    fp = float(np.sum((pred == 1) & (truth == 0)))
    fn = float(np.sum((pred == 0) & (truth == 1)))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def fit_shadow_attack(spec: ClassifierSpec, train: Dataset, pool: Dataset, sup: SupervisedConfig,
                      cfg: ShadowConfig = ShadowConfig(), seed: int = 0) -> Checkpoint:
    """Train ``cfg.n_shadow`` shadow classifiers and an attack model on their outputs.

    Each shadow draws two disjoint random halves from ``pool``, sized like the
    target's training set so the shadows overfit comparably; it trains on the
    first (label "in") and holds out the second (label "out").
    """
    half = min(len(train), len(pool) // 2)
    if half < 2:
        raise ConfigError(f"not enough data for shadow training ({len(pool)} pool samples)")
    feats, labels = [], []
    for i in range(cfg.n_shadow):
        rng = make_rng(seed, 100 + i)
        perm = rng.permutation(len(pool))
        ins, outs = pool.subset(perm[:half]), pool.subset(perm[half:2 * half])
        shadow_seed = int(rng.integers(2**31))
        params = init_network(spec, make_rng(shadow_seed, 10))
        fit_classifier(params, spec, ins, sup, make_rng(shadow_seed, 11))
        shadow = Checkpoint(spec, params)
        feats += [_attack_features(shadow, ins), _attack_features(shadow, outs)]
        labels += [np.ones(len(ins), dtype=np.int64), np.zeros(len(outs), dtype=np.int64)]
    return _train_attack(np.vstack(feats), np.concatenate(labels), cfg, make_rng(seed, 200))


def attack_predictions(target: Checkpoint, attack: Checkpoint, train: Dataset, test: Dataset,
                       seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Attack guesses and ground truth on a balanced in/out evaluation set."""
    n_eval = min(len(train), len(test))
    rng = make_rng(seed, 201)
    ins = train.subset(rng.permutation(len(train))[:n_eval])
    outs = test.subset(rng.permutation(len(test))[:n_eval])
    x = np.vstack([_attack_features(target, ins), _attack_features(target, outs)])
    truth = np.concatenate([np.ones(n_eval, dtype=np.int64), np.zeros(n_eval, dtype=np.int64)])
    return attack.predict(x), truth


def attack_f1(target: Checkpoint, attack: Checkpoint, train: Dataset, test: Dataset,
              seed: int = 0) -> float:
    """F1 in percent, with "in" as the positive class."""
    return f1_score(*attack_predictions(target, attack, train, test, seed)) * 100.0


def mia_ii(target: Checkpoint, train: Dataset, test: Dataset, sup: SupervisedConfig,
           cfg: ShadowConfig = ShadowConfig(), seed: int = 0) -> float:
    """Shadow-model membership attack against ``target``.

    Shadows are drawn from ``test`` (data the target never trained on); the
    attack is then scored on target-training samples versus held-out samples.
    """
    attack = fit_shadow_attack(target.spec, train, test, sup, cfg, seed)
    return attack_f1(target, attack, train, test, seed)


# -- reporting ---------------------------------------------------------------

@dataclass
class RunMetrics:
    method: str
    seed: int
    A_f: float
    A_r: float
    MIA_I: float = float("nan")
    MIA_II: float = float("nan")
    AIN: float = float("nan")
    per_class: list[float] = field(default_factory=list)
    forget: str = ""

    CSV_COLUMNS = ("method", "forget", "seed", "A_f", "A_r", "MIA_I", "MIA_II", "AIN")

    def csv_row(self) -> list[str]:
        return [self.method, self.forget, str(self.seed)] + [
            _fmt(v) for v in (self.A_f, self.A_r, self.MIA_I, self.MIA_II, self.AIN)]


@dataclass
class MetricReport:
    method: str
    seed_count: int
    A_f_mean: float
    A_f_std: float
    A_r_mean: float
    A_r_std: float
    MIA_I: float
    MIA_II: float
    AIN: float
    per_class: list[float] = field(default_factory=list)

    CSV_COLUMNS = ("method", "seed_count", "A_f_mean", "A_f_std", "A_r_mean", "A_r_std",
                   "MIA_I", "MIA_II", "AIN")

    def csv_row(self) -> list[str]:
        return [self.method, str(self.seed_count)] + [
            _fmt(v) for v in (self.A_f_mean, self.A_f_std, self.A_r_mean, self.A_r_std,
                              self.MIA_I, self.MIA_II, self.AIN)]

    def table_row(self) -> str:
        return (f"{self.method:<8} {self.A_f_mean:6.2f}±{self.A_f_std:<5.2f} "
                f"{self.A_r_mean:6.2f}±{self.A_r_std:<5.2f} {self.MIA_I:7.2f} "
                f"{self.MIA_II:7.2f} {self.AIN:6.2f}")


def _fmt(v: float) -> str:
    return "nan" if v != v else f"{v:.4f}"


def _mean(values: Sequence[float]) -> float:
    vals = [v for v in values if v == v]
    return float(np.mean(vals)) if vals else float("nan")


def assemble_report(runs: Sequence[RunMetrics]) -> list[MetricReport]:
    """One row per method (first-seen order): mean and population std."""
    order: list[str] = []
    groups: dict[str, list[RunMetrics]] = {}
    for r in runs:
        if r.method not in groups:
            order.append(r.method)
            groups[r.method] = []
        groups[r.method].append(r)
    rows = []
    for m in order:
        g = groups[m]
        af = np.array([r.A_f for r in g])
        ar = np.array([r.A_r for r in g])
        per_class = []
        if all(r.per_class for r in g):
            per_class = np.mean([r.per_class for r in g], axis=0).tolist()
        rows.append(MetricReport(m, len(g), float(af.mean()), float(af.std()),
                                 float(ar.mean()), float(ar.std()),
                                 _mean([r.MIA_I for r in g]), _mean([r.MIA_II for r in g]),
                                 _mean([r.AIN for r in g]), per_class))
    return rows


def report_csv(rows: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MetricReport.CSV_COLUMNS)
    for r in rows:
        w.writerow(r.csv_row())
    return buf.getvalue()
