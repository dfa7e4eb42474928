"""Distillation and unlearning objectives.

Trainable losses reduce over the batch by MEAN; the retaining entropy
diagnostic reduces by SUM.  Natural log throughout, with ``0 ln 0 = 0``.

Teacher inputs may be plain arrays (constant targets for the student step) or
tensors that still carry a graph back to the generator (generator step).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import nncore as nn
from .errors import ContractError, DegenerateRowError, DimensionError
from .nncore import Tensor

PROB_TOL = 1e-9


@dataclass(frozen=True)
class LabelSplit:
    """Partition of ``{0..K-1}`` into forgetting and retaining classes."""

    num_classes: int
    forget: tuple[int, ...] = ()

    def __post_init__(self):
        forget = tuple(sorted(set(int(c) for c in self.forget)))
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be >= 2, got {self.num_classes}")
        bad = [c for c in forget if not 0 <= c < self.num_classes]
        if bad:
            raise ContractError(f"forget classes {bad} out of range [0, {self.num_classes})")
        if len(forget) == self.num_classes:
            raise ContractError("cannot forget every class: retaining set would be empty")
        object.__setattr__(self, "forget", forget)

    @classmethod
    def of(cls, num_classes: int, forget: Iterable[int] = ()) -> "LabelSplit":
        return cls(num_classes, tuple(forget))

    @property
    def retain(self) -> tuple[int, ...]:
        f = set(self.forget)
        return tuple(k for k in range(self.num_classes) if k not in f)

    @property
    def forget_mask(self) -> np.ndarray:
        m = np.zeros(self.num_classes, dtype=bool)
        m[list(self.forget)] = True
        return m

    @property
    def retain_mask(self) -> np.ndarray:
        return ~self.forget_mask

    def tag(self) -> str:
        return "-".join(str(c) for c in self.forget) or "none"


def _check_probs(t: Tensor, name: str = "teacher") -> None:
    if t.data.ndim != 2:
        raise DimensionError(f"{name} probabilities must be 2-D, got {t.shape}")
    if t.data.size and np.any(np.abs(t.data.sum(axis=1) - 1.0) > PROB_TOL):
        worst = np.max(np.abs(t.data.sum(axis=1) - 1.0))
        raise ContractError(f"{name} rows must sum to 1 (worst deviation {worst:.3g})")


def _kl_terms(teacher_probs, student_log_probs) -> Tensor:
    """Per-entry ``T_k (ln T_k - ln S_k)``, shape ``m x K``."""
    T = nn.as_tensor(teacher_probs)
    S = nn.as_tensor(student_log_probs)
    _check_probs(T)
    if T.shape != S.shape:
        raise DimensionError(f"teacher {T.shape} and student {S.shape} shapes differ")
    return nn.sub(nn.xlogx(T), nn.mul(T, S))


def _batch_mean(total: Tensor, m: int) -> Tensor:
    return nn.scale(total, 1.0 / m)


def kd_loss(teacher_probs, student_log_probs) -> Tensor:
    """Batch-mean ``KL(T || S)``.  Pass a plain array for ``teacher_probs`` to
    keep gradients off the teacher side."""
    terms = _kl_terms(teacher_probs, student_log_probs)
    return _batch_mean(nn.sum_all(terms), terms.shape[0])


def adv_loss(teacher_probs, student_log_probs) -> Tensor:
    """Negated KD loss; minimized by the generator."""
    return nn.scale(kd_loss(teacher_probs, student_log_probs), -1.0)


def is_loss(teacher_probs, student_log_probs, split: LabelSplit) -> Tensor:
    """Inhibited synthesis: negated KL terms on retaining classes, positive
    KL terms on forgetting classes, mean over the batch."""
    terms = _kl_terms(teacher_probs, student_log_probs)
    if terms.shape[1] != split.num_classes:
        raise DimensionError(f"{terms.shape[1]} classes in outputs, split has {split.num_classes}")
    sign = np.where(split.forget_mask, 1.0, -1.0)[None, :]
    return _batch_mean(nn.sum_all(nn.mul(terms, Tensor(sign))), terms.shape[0])


def redistribute_logits(t, split: LabelSplit) -> np.ndarray:
    """Set forgetting logits to the row minimum; spread the removed mass
    evenly over retaining logits.  Row sums are preserved."""
    t = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    if t.ndim != 2 or t.shape[1] != split.num_classes:
        raise DimensionError(f"logits must be m x {split.num_classes}, got {t.shape}")
    n_retain = split.num_classes - len(split.forget)
    if n_retain == 0:
        raise ContractError("redistribution needs at least one retaining class")
    if not split.forget:
        return t.copy()
    fm = split.forget_mask
    row_min = t.min(axis=1, keepdims=True)
    delta = (t[:, fm] - row_min).sum(axis=1, keepdims=True)
    out = t + delta / n_retain
    out[:, fm] = np.broadcast_to(row_min, (t.shape[0], int(fm.sum())))
    return out


def softmax_np(t: np.ndarray) -> np.ndarray:
    e = np.exp(t - t.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def postfilter_target(teacher_logits, split: LabelSplit) -> np.ndarray:
    return softmax_np(redistribute_logits(teacher_logits, split))


def postfilter_kd_loss(teacher_logits, student_log_probs, split: LabelSplit) -> Tensor:
    """KD against ``softmax(redistribute_logits(t))``."""
    return kd_loss(postfilter_target(teacher_logits, split), student_log_probs)


def pd_target(teacher_probs, split: LabelSplit) -> np.ndarray:
    """Zero forgetting probabilities and renormalize the rest."""
    T = np.array(teacher_probs.data if isinstance(teacher_probs, Tensor) else teacher_probs,
                 dtype=np.float64)
    if T.ndim != 2 or T.shape[1] != split.num_classes:
        raise DimensionError(f"probabilities must be m x {split.num_classes}, got {T.shape}")
    if not split.forget:
        return T
    T[:, split.forget_mask] = 0.0
    mass = T.sum(axis=1, keepdims=True)
    bad = np.flatnonzero(mass[:, 0] <= 1e-12)
    if bad.size:
        raise DegenerateRowError(f"rows {bad[:5].tolist()} have no retaining probability mass")
    return T / mass


def pd_target_from_logits(t, split: LabelSplit) -> np.ndarray:
    """Same target as :func:`pd_target`, computed as a softmax over the
    retaining logits so saturated rows never lose their retaining mass."""
    t = np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    if t.ndim != 2 or t.shape[1] != split.num_classes:
        raise DimensionError(f"logits must be m x {split.num_classes}, got {t.shape}")
    out = np.zeros_like(t)
    out[:, split.retain_mask] = softmax_np(t[:, split.retain_mask])
    return out


def balance_loss(teacher_probs) -> Tensor:
    """Negative entropy of the batch-mean teacher distribution."""
    T = nn.as_tensor(teacher_probs)
    _check_probs(T)
    return nn.sum_all(nn.xlogx(nn.col_mean(T)))


def batch_retaining_entropy(teacher_probs, split: LabelSplit) -> float:
    """Summed (not averaged) entropy contribution of retaining classes."""
    T = np.asarray(teacher_probs.data if isinstance(teacher_probs, Tensor) else teacher_probs,
                   dtype=np.float64)
    if T.size == 0:
        return 0.0
    R = T[:, split.retain_mask]
    pos = R > 0
    return float(-np.sum(np.where(pos, R * np.log(np.where(pos, R, 1.0)), 0.0)))
