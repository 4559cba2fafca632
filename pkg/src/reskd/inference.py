"""Sample-adaptive truncation of the res-student chain.

Each sample starts from S0 and keeps adding res-students while its running
energy is at or below the threshold.  Res-students past the stopping point
are never evaluated for that sample.
"""
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional

import numpy as np

from .artifact import StageArtifact
from .errors import DomainError, ShapeError
from .pipeline import accuracy, combined_logits, energy_sample


class AdaptiveMode(str, Enum):
    ADDITIVE = "additive"  # E_i = E_{i-1} + Energy(R_i)
    EXACT = "exact"        # E_i = Energy(S_i)


@dataclass
class InferenceRecord:
    sample_id: int
    stage: int
    logits: np.ndarray
    predicted: int
    energies: List[float]
    evaluations: int  # res-student forward passes spent on this sample


@dataclass
class CostReport:
    num_samples: int
    n: int
    mode: str
    th_energy: float
    stage_histogram: List[int]
    skip_fraction: List[float]  # per res-student R_1..R_n
    mean_evaluated_stages: float
    adaptive_accuracy: Optional[float] = None
    full_accuracy: Optional[float] = None

    def as_dict(self):
        out = dict(self.__dict__)
        # an unbounded threshold (full chain) is stored as null
        if not np.isfinite(out["th_energy"]):
            out["th_energy"] = None
        return out


def _truncated(artifact: StageArtifact, X, mode, th):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != artifact.s0.in_dim:
        raise ShapeError(f"inputs must have shape (N, {artifact.s0.in_dim}), got {X.shape}")
    mode = AdaptiveMode(mode)
    n_samples = X.shape[0]
    logits = artifact.s0(X)
    energy = energy_sample(logits)
    history = [[float(e)] for e in energy]
    stage = np.zeros(n_samples, dtype=np.int64)
    evals = np.zeros(n_samples, dtype=np.int64)
    active = (th >= energy) & (artifact.n > 0)
    for i, r_net in enumerate(artifact.res_students, start=1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        r = r_net(X[idx])
        logits[idx] = logits[idx] + r
        evals[idx] += 1
        stage[idx] = i
        if mode is AdaptiveMode.ADDITIVE:
            e = energy[idx] + energy_sample(r)
        else:
            e = energy_sample(logits[idx])
        energy[idx] = e
        for j, v in zip(idx, e):
            history[j].append(float(v))
        active[idx] = (th >= e) & (i < artifact.n)
    return logits, stage, history, evals


def adaptive_infer(artifact: StageArtifact, x, mode=AdaptiveMode.ADDITIVE, th=None,
                   sample_id=0) -> InferenceRecord:
    """Run the truncated chain on one sample (``th`` defaults to the artifact's)."""
    th = artifact.th_energy if th is None else th
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a single feature row, got shape {x.shape}")
    logits, stage, history, evals = _truncated(artifact, x[None, :], mode, th)
    return InferenceRecord(sample_id, int(stage[0]), logits[0], int(np.argmax(logits[0])),
                           history[0], int(evals[0]))


def batch_adaptive_infer(artifact: StageArtifact, X, mode=AdaptiveMode.ADDITIVE, th=None,
                         labels=None):
    """Adaptive inference over a dataset; returns ``(records, CostReport)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DomainError("adaptive inference needs a non-empty 2-D batch")
    th = artifact.th_energy if th is None else th
    logits, stage, history, evals = _truncated(artifact, X, mode, th)
    preds = np.argmax(logits, axis=1)
    records = [InferenceRecord(j, int(stage[j]), logits[j], int(preds[j]), history[j], int(evals[j]))
               for j in range(X.shape[0])]
    report = _cost_report(artifact, X, stage, logits, AdaptiveMode(mode), th, labels)
    return records, report


def _cost_report(artifact, X, stage, logits, mode, th, labels):
    n = artifact.n
    hist = np.bincount(stage, minlength=n + 1)
    skip = [float(np.mean(stage < i)) for i in range(1, n + 1)]
    report = CostReport(len(stage), n, mode.value, float(th), hist.tolist(), skip,
                        float(np.mean(stage)))
    if labels is not None:
        labels = np.asarray(labels)
        report.adaptive_accuracy = accuracy(logits, labels)
        report.full_accuracy = accuracy(combined_logits(artifact, X), labels)
    return report


def threshold_sweep(artifact: StageArtifact, X, labels, thresholds, mode=AdaptiveMode.ADDITIVE):
    """One row per threshold: accuracy, mean evaluated res-students, skip fractions."""
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise DomainError("thresholds must be sorted ascending")
    rows = []
    for th in thresholds:
        _, report = batch_adaptive_infer(artifact, X, mode, th, labels)
        rows.append({
            "th": th,
            "accuracy": report.adaptive_accuracy,
            "mean_stages": report.mean_evaluated_stages,
            "skip_fraction": report.skip_fraction,
        })
    return rows


def default_thresholds(artifact: StageArtifact, points, mode=AdaptiveMode.ADDITIVE):
    """Evenly spaced thresholds from 0 up to a value no sample can exceed."""
    if points < 2:
        raise DomainError("a sweep needs at least 2 points")
    # additive energies are bounded by n + 1, exact ones by 1 (plus rounding)
    top = artifact.n + 1.0 if AdaptiveMode(mode) is AdaptiveMode.ADDITIVE else 1.0 + 1e-9
    return np.linspace(0.0, top, points).tolist()
