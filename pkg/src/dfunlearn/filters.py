"""Sample selection between synthesis and distillation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .losses import LabelSplit

FILTER_KINDS = ("none", "prefilter", "blockf")


def default_delta(num_classes: int) -> float:
    """0.01 for ten classes, 0.001 for a hundred; ``0.1 / K`` in general."""
    return 0.1 / num_classes


@dataclass(frozen=True)
class FilterConfig:
    kind: str = "none"
    delta: float | None = None

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ConfigError(f"unknown filter kind {self.kind!r}; expected one of {FILTER_KINDS}")
        if self.kind == "prefilter" and self.delta is not None and not 0 < self.delta <= 1:
            raise ConfigError(f"prefilter delta must lie in (0, 1], got {self.delta}")

    def resolved_delta(self, num_classes: int) -> float:
        return self.delta if self.delta is not None else default_delta(num_classes)


@dataclass(frozen=True)
class FilterOutcome:
    keep_mask: np.ndarray

    @property
    def kept_count(self) -> int:
        return int(self.keep_mask.sum())

    @property
    def dropped_count(self) -> int:
        return int(self.keep_mask.size - self.keep_mask.sum())


def _probs(teacher_probs) -> np.ndarray:
    return np.asarray(getattr(teacher_probs, "data", teacher_probs), dtype=np.float64)


def prefilter(teacher_probs, split: LabelSplit, delta: float) -> FilterOutcome:
    """Keep a sample iff every forgetting-class probability is below ``delta``."""
    T = _probs(teacher_probs)
    if not split.forget:
        return FilterOutcome(np.ones(T.shape[0], dtype=bool))
    return FilterOutcome(np.all(T[:, split.forget_mask] < delta, axis=1))


def blockf(teacher_probs, split: LabelSplit) -> FilterOutcome:
    """Keep a sample iff the teacher's argmax (lowest index on ties) is retained."""
    T = _probs(teacher_probs)
    return FilterOutcome(~split.forget_mask[np.argmax(T, axis=1)])


def apply_filter(cfg: FilterConfig, teacher_probs, split: LabelSplit) -> FilterOutcome:
    if cfg.kind == "prefilter":
        return prefilter(teacher_probs, split, cfg.resolved_delta(split.num_classes))
    if cfg.kind == "blockf":
        return blockf(teacher_probs, split)
    return FilterOutcome(np.ones(_probs(teacher_probs).shape[0], dtype=bool))
