"""Teacher training, gold retraining and the data-free unlearning loop."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import nncore as nn
from .checkpoint import Checkpoint
from .data import Dataset, restrict
from .errors import ConfigError, ContractError, TrainingError
from .filters import FilterConfig, apply_filter
from .losses import (LabelSplit, adv_loss, balance_loss, batch_retaining_entropy, is_loss,
                     kd_loss, pd_target_from_logits, postfilter_target)
from .models import (ClassifierSpec, GeneratorSpec, classifier_logits, generate, init_network,
                     make_rng, sample_noise)

log = logging.getLogger(__name__)

# name -> (generator loss, student target, filter)
METHODS: dict[str, tuple[str, str, str]] = {
    "DFKD": ("adv", "raw", "none"),
    "BlockF": ("adv", "raw", "blockf"),
    "GKT": ("adv", "raw", "prefilter"),
    "IS": ("is", "raw", "prefilter"),
    "PF": ("adv", "postfilter", "none"),
    "ISPF": ("is", "postfilter", "none"),
    "PD": ("adv", "pd", "none"),
    "PD_IS": ("is", "pd", "none"),
}


@dataclass(frozen=True)
class MethodSpec:
    name: str

    def __post_init__(self):
        if self.name not in METHODS:
            raise ConfigError(f"unknown method {self.name!r}; valid methods: {', '.join(METHODS)}")

    @property
    def generator_loss(self) -> str:
        return METHODS[self.name][0]

    @property
    def student_target(self) -> str:
        return METHODS[self.name][1]

    @property
    def filter(self) -> str:
        return METHODS[self.name][2]


@dataclass(frozen=True)
class SupervisedConfig:
    """Plain cross-entropy training of a classifier on real data."""

    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"invalid supervised config: {self}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        _check_milestones(self.milestones)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    loops_per_epoch: int = 1
    n_g: int = 1
    n_s: int = 10
    lr_g: float = 1e-3
    lr_s: float = 0.05
    batch_size: int = 128
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1
    seed: int = 0
    method: str = "ISPF"
    delta: float | None = None
    balance_weight: float = 0.0
    noise_dim: int = 8
    generator_hidden: tuple[int, ...] = (64, 64)
    student_momentum: float = 0.9
    x_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        for name in ("epochs", "loops_per_epoch", "n_g", "n_s", "batch_size", "noise_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.balance_weight < 0:
            raise ConfigError(f"balance_weight must be >= 0, got {self.balance_weight}")
        if not (self.lr_g > 0 and self.lr_s > 0):
            raise ConfigError("learning rates must be positive")
        _check_milestones(self.milestones)
        MethodSpec(self.method)
        FilterConfig(self.method_spec.filter, self.delta)

    @property
    def method_spec(self) -> MethodSpec:
        return MethodSpec(self.method)

    @property
    def filter(self) -> FilterConfig:
        return FilterConfig(self.method_spec.filter, self.delta)

    @property
    def total_student_steps(self) -> int:
        return self.epochs * self.loops_per_epoch * self.n_s


def _check_milestones(ms) -> None:
    if any(b <= a for a, b in zip(ms, ms[1:])):
        raise ConfigError(f"milestones must be strictly increasing, got {list(ms)}")


@dataclass
class StepLog:
    step: int
    epoch: int
    loop: int
    loss_g: float
    loss_s: float
    class_counts: list[int]
    n_forget_synth: int
    n_filtered: int
    kept: int
    H_B: float
    wall_ms: float

    CSV_COLUMNS = ("step", "epoch", "loop", "loss_g", "loss_s", "n_forget_synth",
                   "n_filtered", "kept", "H_B", "wall_ms")

    def csv_row(self) -> list[str]:
        return [str(self.step), str(self.epoch), str(self.loop), f"{self.loss_g:.8g}",
                f"{self.loss_s:.8g}", str(self.n_forget_synth), str(self.n_filtered),
                str(self.kept), f"{self.H_B:.8g}", f"{self.wall_ms:.3f}"]


class UnlearnResult(NamedTuple):
    student: Checkpoint
    logs: list[StepLog]
    generator: Checkpoint


def synthesis_composition(teacher_probs, split: LabelSplit) -> tuple[np.ndarray, int]:
    """Teacher-argmax counts per class (ties go to the lowest index) and the
    number landing in forgetting classes."""
    T = np.asarray(getattr(teacher_probs, "data", teacher_probs))
    counts = np.bincount(np.argmax(T, axis=1), minlength=split.num_classes)
    return counts, int(counts[split.forget_mask].sum())


def cross_entropy(logits: nn.Tensor, labels: np.ndarray) -> nn.Tensor:
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return nn.scale(nn.sum_all(nn.mul(nn.log_softmax(logits), nn.Tensor(onehot))), -1.0 / labels.size)


def accuracy_of(ckpt: Checkpoint, ds: Dataset) -> float:
    return float(np.mean(ckpt.predict(ds.x) == ds.y) * 100.0)


def fit_classifier(params: nn.ParameterSet, spec: ClassifierSpec, train: Dataset,
                   cfg: SupervisedConfig, rng: np.random.Generator,
                   max_steps: int | None = None,
                   on_step: Callable[[int], bool] | None = None) -> int:
    """Minibatch SGD on cross-entropy.  Returns the number of steps taken.

    ``on_step(step)`` runs after every update; returning True stops early.
    """
    opt = nn.SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    n = len(train)
    step = 0
    for epoch in range(cfg.epochs if max_steps is None else 10**9):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            params.zero_grads()
            loss = cross_entropy(classifier_logits(params, spec, train.x[idx]), train.y[idx])
            if not np.isfinite(loss.item()):
                raise TrainingError(f"supervised loss became {loss.item()} at step {step}")
            nn.backward(loss)
            opt.step()
            step += 1
            if on_step is not None and on_step(step):
                return step
            if max_steps is not None and step >= max_steps:
                return step
        if epoch + 1 in cfg.milestones:
            opt.lr *= cfg.gamma
    return step


def train_teacher(train: Dataset, spec: ClassifierSpec, cfg: SupervisedConfig,
                  test: Dataset | None = None) -> Checkpoint:
    params = init_network(spec, make_rng(cfg.seed, 10))
    if cfg.epochs > 0:
        fit_classifier(params, spec, train, cfg, make_rng(cfg.seed, 11))
    ckpt = Checkpoint(spec, params)
    ckpt.meta["train_acc"] = accuracy_of(ckpt, train)
    if test is not None:
        ckpt.meta["test_acc"] = accuracy_of(ckpt, test)
    return ckpt


def retrain_gold(train: Dataset, split: LabelSplit, spec: ClassifierSpec, cfg: SupervisedConfig,
                 test: Dataset | None = None) -> Checkpoint:
    """Train from scratch on retaining-class samples only."""
    if split.num_classes != spec.num_classes:
        raise ContractError(f"split has {split.num_classes} classes, spec has {spec.num_classes}")
    retained = restrict(train, split.retain)
    return train_teacher(retained, spec, cfg, None if test is None else restrict(test, split.retain))


def run_unlearning(teacher: Checkpoint, config: TrainConfig, split: LabelSplit,
                   on_step: Callable[[StepLog], None] | None = None) -> UnlearnResult:
    """Distill ``teacher`` into a fresh student through a jointly trained generator."""
    spec = teacher.spec
    if not isinstance(spec, ClassifierSpec) or spec.num_classes != split.num_classes:
        raise ContractError(f"teacher has {getattr(spec, 'num_classes', '?')} classes, "
                            f"split expects {split.num_classes}")
    method = config.method_spec
    fcfg = config.filter
    lo, hi = config.x_range
    gspec = GeneratorSpec(config.noise_dim, config.generator_hidden, spec.input_dim, lo, hi)

    student = init_network(spec, make_rng(config.seed, 1))
    generator = init_network(gspec, make_rng(config.seed, 2))
    noise_rng = make_rng(config.seed, 3)
    teacher_params = teacher.params.frozen()
    g_opt = nn.Adam(generator, config.lr_g)
    s_opt = nn.SGD(student, config.lr_s, config.student_momentum)

    logs: list[StepLog] = []
    loss_g = float("nan")
    step = 0
    tick = time.perf_counter()
    for epoch in range(config.epochs):
        for loop in range(config.loops_per_epoch):
            for _ in range(config.n_g):
                z = sample_noise(noise_rng, config.batch_size, config.noise_dim)
                x = generate(generator, gspec, z)
                t_probs = nn.softmax(classifier_logits(teacher_params, spec, x))
                s_logp = nn.log_softmax(classifier_logits(student, spec, x, frozen=True))
                if method.generator_loss == "is":
                    lg = is_loss(t_probs, s_logp, split)
                else:
                    lg = adv_loss(t_probs, s_logp)
                if config.balance_weight > 0:
                    lg = nn.add(lg, nn.scale(balance_loss(t_probs), config.balance_weight))
                loss_g = lg.item()
                if not np.isfinite(loss_g):
                    raise TrainingError(f"generator loss became {loss_g} at epoch {epoch} loop {loop}")
                generator.zero_grads()
                nn.backward(lg)
                g_opt.step()

            for _ in range(config.n_s):
                z = sample_noise(noise_rng, config.batch_size, config.noise_dim)
                x = generate(generator, gspec, z, frozen=True).data
                t_logits = classifier_logits(teacher_params, spec, x).data
                t_probs = nn.softmax(nn.Tensor(t_logits)).data
                counts, n_forget = synthesis_composition(t_probs, split)
                keep = apply_filter(fcfg, t_probs, split).keep_mask
                kept = int(keep.sum())

                if method.student_target == "postfilter":
                    target = postfilter_target(t_logits, split)
                elif method.student_target == "pd":
                    target = pd_target_from_logits(t_logits, split)
                else:
                    target = t_probs

                loss_s = float("nan")
                if kept > 0:
                    s_logp = nn.log_softmax(classifier_logits(student, spec, x[keep]))
                    ls = kd_loss(target[keep], s_logp)
                    loss_s = ls.item()
                    if not np.isfinite(loss_s):
                        raise TrainingError(f"student loss became {loss_s} at step {step} "
                                            f"(epoch {epoch}, loop {loop}, kept {kept})")
                    student.zero_grads()
                    nn.backward(ls)
                    s_opt.step()

                now = time.perf_counter()
                entry = StepLog(step, epoch, loop, loss_g, loss_s, counts.tolist(), n_forget,
                                int(keep.size - kept), kept,
                                batch_retaining_entropy(t_probs[keep], split), (now - tick) * 1e3)
                tick = now
                logs.append(entry)
                if on_step is not None:
                    on_step(entry)
                step += 1
        if epoch + 1 in config.milestones:
            s_opt.lr *= config.gamma

    meta = {"epochs": float(config.epochs), "seed": float(config.seed)}
    return UnlearnResult(Checkpoint(spec, student, meta), logs, Checkpoint(gspec, generator))


def dump_synthetic(generator: Checkpoint, teacher: Checkpoint, n: int, seed: int = 0) -> np.ndarray:
    """``n`` synthetic samples with the teacher's probabilities appended column-wise."""
    z = sample_noise(make_rng(seed, 99), n, generator.spec.noise_dim)
    x = generate(generator.params, generator.spec, z, frozen=True).data
    return np.hstack([x, teacher.proba(x)])


def config_dict(cfg) -> dict:
    return asdict(cfg)
