"""Loss terms and their gradients w.r.t. probabilities / sigmoid scores.

Every function returns ``(value, grad)`` where ``grad`` has the shape of the
prediction it differentiates. Softmax and sigmoid Jacobians are applied by
:class:`mlsl.model.Pass`, not here.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from mlsl.grid import IGNORE

log = logging.getLogger(__name__)

EPS = 1e-12
REDUCTIONS = ("mean", "sum")

_clamped = 0


def clamp_events() -> int:
    """How many probabilities/scores have been clamped at EPS so far."""
    return _clamped


def _note_clamp(n: int) -> None:
    global _clamped
    if n:
        _clamped += n
        log.warning("clamped %d probabilities to %g", n, EPS)


@dataclass(frozen=True)
class LossConfig:
    lambda_fcl: float = 0.025
    reduction: str = "mean"

    def __post_init__(self):
        if not np.isfinite(self.lambda_fcl) or self.lambda_fcl < 0:
            raise ValueError(f"lambda_fcl must be finite and >= 0, got {self.lambda_fcl}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")


def seg_ce(probs: np.ndarray, labels: np.ndarray, reduction: str = "mean") -> tuple[float, np.ndarray]:
    """Pixel cross-entropy over labeled pixels.

    ``probs`` is (..., C) and ``labels`` the matching (...) index map.
    IGNORE pixels contribute neither value nor gradient; with ``"mean"`` the
    sum is divided by the number of labeled pixels.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape[:-1] != labels.shape:
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} disagree")
    grad = np.zeros_like(probs)
    mask = labels != IGNORE
    n = int(mask.sum())
    if n == 0:
        return 0.0, grad
    idx = np.nonzero(mask)
    p_true = probs[idx + (labels[mask],)]
    _note_clamp(int(np.count_nonzero(p_true < EPS)))
    p_true = np.maximum(p_true, EPS)
    scale = 1.0 / n if reduction == "mean" else 1.0
    value = -np.sum(np.log(p_true)) * scale
    grad[idx + (labels[mask],)] = -scale / p_true
    return float(value), grad


def masked_ce(probs: np.ndarray, pseudo: np.ndarray, reduction: str = "mean") -> tuple[float, np.ndarray]:
    """Self-training cross-entropy on pseudo-labeled pixels only.

    The binary map of labeled pixels is ``pseudo != IGNORE``; outside it the
    loss is silent, so this is :func:`seg_ce` applied to the pseudo-label map.
    """
    return seg_ce(probs, pseudo, reduction)


def bce(scores: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Multi-label binary cross-entropy averaged over the C classes.

    Works on a single C-vector or an (N, C) batch; a batch sums the
    per-image losses.
    """
    s = np.asarray(scores, dtype=np.float64)
    c = np.asarray(targets, dtype=np.float64)
    if s.shape != c.shape:
        raise ValueError(f"scores {s.shape} and targets {c.shape} disagree")
    n_classes = s.shape[-1]
    _note_clamp(int(np.count_nonzero((s < EPS) | (s > 1 - EPS))))
    s = np.clip(s, EPS, 1 - EPS)
    value = -np.sum(c * np.log(s) + (1 - c) * np.log(1 - s)) / n_classes
    grad = -(c / s - (1 - c) / (1 - s)) / n_classes
    return float(value), grad


def composite(seg_value: float, cls_value: float, lambda_fcl: float) -> float:
    return seg_value + lambda_fcl * cls_value


@dataclass(frozen=True)
class LossValue:
    """Per-step loss breakdown; ``cls_*`` are unweighted BCE values."""

    seg_src: float
    seg_tgt: float
    cls_src: float = 0.0
    cls_tgt: float = 0.0
    lambda_fcl: float = 0.0

    @property
    def total(self) -> float:
        return composite(self.seg_src, self.cls_src, self.lambda_fcl) + composite(
            self.seg_tgt, self.cls_tgt, self.lambda_fcl
        )

    def as_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


def joint_st(src_probs, src_labels, tgt_probs, tgt_pseudo, reduction: str = "mean") -> LossValue:
    """Source cross-entropy plus masked target cross-entropy.

    Inputs are batches (lists or stacked arrays); batch values sum per-image
    losses. An empty target batch contributes zero.
    """
    return LossValue(
        seg_src=sum(seg_ce(p, y, reduction)[0] for p, y in zip(src_probs, src_labels)),
        seg_tgt=sum(masked_ce(p, y, reduction)[0] for p, y in zip(tgt_probs, tgt_pseudo)),
    )


def stwl(src: tuple[float, float], tgt: tuple[float, float], lambda_fcl: float) -> LossValue:
    """Combine ``(seg, cls)`` loss pairs of both domains with one lambda."""
    return LossValue(src[0], tgt[0], src[1], tgt[1], lambda_fcl)
