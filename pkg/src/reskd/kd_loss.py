"""Distillation objective: ``tau * t^2 * match(S, T) + (1 - tau) * CE(S, y)``.

Every function works on a single logits row or on a batch of rows.  Batch
losses are averaged over rows; returned gradients are per-row gradients of
the per-row loss (``net.backward`` does the averaging over the batch).
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DomainError, ShapeError
from .net import log_softmax_t, softmax_t


class LossKind(str, Enum):
    KL = "kl"
    L2PROB = "l2prob"
    L2LOGIT = "l2logit"


class CeTargetMode(str, Enum):
    COMBINED = "combined"
    RESIDUAL_ONLY = "residual_only"


@dataclass(frozen=True)
class KdLossParams:
    tau: float = 0.5
    temperature: float = 20.0
    kind: LossKind = LossKind.L2LOGIT
    ce_target_mode: CeTargetMode = CeTargetMode.COMBINED

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise DomainError(f"tau must be in [0, 1], got {self.tau}")
        if not self.temperature > 0:
            raise DomainError(f"temperature must be > 0, got {self.temperature}")
        object.__setattr__(self, "kind", LossKind(self.kind))
        object.__setattr__(self, "ce_target_mode", CeTargetMode(self.ce_target_mode))


def _rows(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _finish(losses, grads, single):
    if single:
        return float(losses[0]), grads[0]
    return float(np.mean(losses)), grads


def _ce_rows(s, labels):
    k = s.shape[1]
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape[0] != s.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {s.shape[0]} rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise DomainError(f"label out of range 0..{k - 1}")
    rows = np.arange(s.shape[0])
    labels = labels.astype(np.int64)
    logp = log_softmax_t(s, 1.0)
    grads = np.exp(logp)
    grads[rows, labels] -= 1.0
    return -logp[rows, labels], grads


def _match_rows(s, tt, kind, t):
    if s.shape != tt.shape:
        raise ShapeError(f"student shape {s.shape} != teacher shape {tt.shape}")
    if not t > 0:
        raise DomainError(f"temperature must be > 0, got {t}")
    kind = LossKind(kind)
    if kind is LossKind.L2LOGIT:
        diff = s - tt
        return np.sum(diff * diff, axis=1), 2.0 * diff
    if kind is LossKind.KL:
        log_p = log_softmax_t(tt, t)
        log_q = log_softmax_t(s, t)
        p = np.exp(log_p)
        # rounding can push a true-zero KL slightly negative
        losses = np.maximum(np.sum(p * (log_p - log_q), axis=1), 0.0)
        return losses, (np.exp(log_q) - p) / t
    p = softmax_t(tt, t)
    q = softmax_t(s, t)
    d = q - p
    qd = np.sum(q * d, axis=1, keepdims=True)
    return np.sum(d * d, axis=1), 2.0 / t * q * (d - qd)


def ce_loss(student_logits, label, num_classes=None):
    """Cross-entropy ``-log softmax(S)[y]`` and its gradient ``softmax(S) - onehot(y)``."""
    s, single = _rows(student_logits)
    if num_classes is not None and s.shape[1] != num_classes:
        raise ShapeError(f"logits have {s.shape[1]} entries, expected {num_classes}")
    return _finish(*_ce_rows(s, label), single)


def match_loss(S, T, kind=LossKind.L2LOGIT, t=1.0):
    """Teacher-matching term and its gradient with respect to ``S``.

    kl       KL(softmax(T/t) || softmax(S/t))
    l2prob   ||softmax(S/t) - softmax(T/t)||^2
    l2logit  ||S - T||^2 on raw logits (``t`` unused)
    """
    s, single = _rows(S)
    return _finish(*_match_rows(s, _rows(T)[0], kind, t), single)


def kd_loss(S, T, label, params: KdLossParams, ce_offset=None):
    """Combined distillation loss and gradient with respect to ``S``.

    ``ce_offset`` (logits of the frozen previous student) is added to ``S``
    inside the cross-entropy term only; the gradient still flows to ``S``.
    """
    s, single = _rows(S)
    tt = _rows(T)[0]
    if s.shape != tt.shape:
        raise ShapeError(f"student shape {s.shape} != teacher shape {tt.shape}")
    tau, t = params.tau, params.temperature
    total = np.zeros(s.shape[0])
    grads = np.zeros_like(s)
    if tau > 0:
        m_loss, m_grad = _match_rows(s, tt, params.kind, t)
        total += tau * t * t * m_loss
        grads += tau * t * t * m_grad
    if tau < 1:
        ce_in = s if ce_offset is None else s + _rows(ce_offset)[0]
        c_loss, c_grad = _ce_rows(ce_in, label)
        total += (1.0 - tau) * c_loss
        grads += (1.0 - tau) * c_grad
    return _finish(total, grads, single)
