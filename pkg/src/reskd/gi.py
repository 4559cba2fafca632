"""Gradient-informativeness (GI) diagnostics for the residual chain.

GI of a sample is the L2 norm of the parameter gradient of the
teacher-matching loss.  Per layer it factors through the back-propagation
operator ``Pi_l`` (see :func:`reskd.net.pi_matrix`), which gives the bound

    GI_l = ||Pi_l g|| ||a_{l-1}||  <=  ||Pi_l||_2 ||a_{l-1}|| ||g||

with ``g`` the loss gradient at the logits.  For the squared-L2 logit loss
``||g|| = 2 ||S - T||``, so stage-level GI-hat is reported as the mean
logit distance to the teacher (the unknown constant factored out).
"""
import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .artifact import StageArtifact
from .errors import DomainError
from .kd_loss import LossKind, _match_rows
from .net import Mlp, _act_deriv, _check_trace, backward, forward, pi_matrix
from .pipeline import combined_logits

log = logging.getLogger(__name__)


class PowerIterationWarning(RuntimeWarning):
    pass


def spectral_norm(A, tol=1e-10, max_iter=1000, seed=0):
    """Largest singular value of ``A`` by power iteration on ``A^T A``.

    Returns ``(sigma, converged)``.  When the iteration does not converge the
    Frobenius norm (an upper bound) is returned with ``converged=False``.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.size == 0 or not np.any(A):
        return 0.0, True
    G = A.T @ A if A.shape[0] >= A.shape[1] else A @ A.T
    v = np.random.default_rng(seed).standard_normal(G.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = G @ v
        lam = float(v @ w)
        if np.linalg.norm(w - lam * v) <= tol * abs(lam):
            return float(np.sqrt(max(lam, 0.0))), True
        v = w / np.linalg.norm(w)
    warnings.warn("power iteration did not converge; using Frobenius norm",
                  PowerIterationWarning, stacklevel=2)
    return float(np.linalg.norm(A)), False


def gi_exact(net: Mlp, x, loss_grad_at_logits):
    """L2 norm of the full weight gradient for one sample."""
    _, trace = forward(net, np.asarray(x, dtype=np.float64).reshape(1, -1))
    grads = backward(net, trace, np.asarray(loss_grad_at_logits).reshape(1, -1))
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.weights)))


def gi_layer_norms(net: Mlp, x, loss_grad_at_logits):
    """Per-layer weight-gradient norms for one sample (layer 1 first)."""
    _, trace = forward(net, np.asarray(x, dtype=np.float64).reshape(1, -1))
    grads = backward(net, trace, np.asarray(loss_grad_at_logits).reshape(1, -1))
    return [float(np.linalg.norm(g)) for g in grads.weights]


@dataclass
class LayerBound:
    exact: float
    bound: float
    pi_norm: float
    frobenius_fallback: bool = False


def gi_layer_bound(net: Mlp, trace, sample, l, loss_grad_at_logits) -> LayerBound:
    """Exact layer-``l`` GI of one sample and its Pi-matrix upper bound."""
    _check_trace(net, trace)
    g = np.asarray(loss_grad_at_logits, dtype=np.float64).ravel()
    pi = pi_matrix(net, trace, sample, l)
    a_prev = trace.post[l - 1][sample]
    # outer(u, a) is rank one: its spectral norm is ||u|| ||a||
    exact = float(np.linalg.norm(pi @ g) * np.linalg.norm(a_prev))
    pi_norm, converged = spectral_norm(pi)
    bound = pi_norm * float(np.linalg.norm(a_prev)) * float(np.linalg.norm(g))
    return LayerBound(exact, bound, pi_norm, not converged)


def stage_logits(artifact: StageArtifact, X, i):
    return combined_logits(artifact, np.asarray(X, dtype=np.float64), i)


def gi_hat_stage(artifact: StageArtifact, X, i):
    """GI-hat / C1 of the stage-``i`` student: mean ||S_i(x) - T(x)||_2 over ``X``."""
    if not 0 <= i <= artifact.n:
        raise IndexError(f"stage {i} out of range 0..{artifact.n}")
    X = np.asarray(X, dtype=np.float64)
    diff = stage_logits(artifact, X, i) - artifact.teacher(X)
    return float(np.mean(np.linalg.norm(diff, axis=1)))


@dataclass
class StageGiStats:
    stage: int
    mean_gi: float
    mean_layer_gi: List[float]
    mean_tightness: List[float]   # mean exact / bound per layer
    max_bound_ratio: float        # max exact / bound over samples and layers
    c_max: float                  # max_x sqrt(sum_l (||Pi_l|| ||a_{l-1}||)^2)
    c_max_layer: float            # max_{x,l} ||Pi_l|| ||a_{l-1}||
    max_chain_ratio: float        # max_x GI / (c_max ||g||)
    max_decomposition_error: float
    max_gkd_error: Optional[float]
    frobenius_fallbacks: int


@dataclass
class GiReport:
    gi_hat: List[float]
    deltas: List[float]
    k: List[Optional[float]]
    telescoping_residual: float
    product_residual: float
    c_max: float
    stages: List[StageGiStats] = field(default_factory=list)

    def as_dict(self):
        d = dict(self.__dict__)
        d["stages"] = [dict(s.__dict__) for s in self.stages]
        return d


def _stage_stats(artifact, X, i, kind, t):
    net = artifact.stage_net(i)
    s = stage_logits(artifact, X, i)
    tt = artifact.teacher(X)
    _, g = _match_rows(s, tt, kind, t)
    _, trace = forward(net, X)
    L = net.num_layers

    # per-sample deltas at each layer's pre-activation, delta[l-1] for layer l
    deltas = [None] * L
    delta = g
    for l in range(L, 0, -1):
        if l < L:
            delta = delta * _act_deriv(net.activation, trace.pre[l - 1])
        deltas[l - 1] = delta
        delta = delta @ net.weights[l - 1]

    n = X.shape[0]
    exact = np.zeros((n, L))
    bound = np.zeros((n, L))
    c_terms = np.zeros((n, L))
    fallbacks = 0
    for j in range(n):
        for l in range(1, L + 1):
            lb = gi_layer_bound(net, trace, j, l, g[j])
            exact[j, l - 1] = lb.exact
            bound[j, l - 1] = lb.bound
            c_terms[j, l - 1] = lb.pi_norm * np.linalg.norm(trace.post[l - 1][j])
            fallbacks += lb.frobenius_fallback
    gi = np.sqrt(np.sum(exact ** 2, axis=1))

    # independent route for the decomposition: norms of per-layer outer products
    direct = np.stack([np.linalg.norm(deltas[l], axis=1) * np.linalg.norm(trace.post[l], axis=1)
                       for l in range(L)], axis=1)
    gi_direct = np.sqrt(np.sum(direct ** 2, axis=1))
    decomp_err = float(np.max(np.abs(gi_direct - gi) / np.maximum(gi, 1e-300)))

    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(bound > 0, exact / bound, 0.0)
    c_max = float(np.max(np.sqrt(np.sum(c_terms ** 2, axis=1))))
    g_norm = np.linalg.norm(g, axis=1)
    chain = gi / np.maximum(c_max * g_norm, 1e-300)
    gkd_err = None
    if LossKind(kind) is LossKind.L2LOGIT:
        dist = np.linalg.norm(s - tt, axis=1)
        gkd_err = float(np.max(np.abs(g_norm - 2 * dist) / np.maximum(2 * dist, 1e-300)))
    return StageGiStats(
        stage=i,
        mean_gi=float(np.mean(gi)),
        mean_layer_gi=np.mean(exact, axis=0).tolist(),
        mean_tightness=np.mean(ratio, axis=0).tolist(),
        max_bound_ratio=float(np.max(ratio)),
        c_max=c_max,
        c_max_layer=float(np.max(c_terms)),
        max_chain_ratio=float(np.max(chain)),
        max_decomposition_error=decomp_err,
        max_gkd_error=gkd_err,
        frobenius_fallbacks=int(fallbacks),
    )


def chain_identities(gi_hat):
    """Deltas, k factors and the closure residuals of the telescoping and product forms."""
    gi_hat = [float(v) for v in gi_hat]
    n = len(gi_hat) - 1
    deltas = [gi_hat[i - 1] - gi_hat[i] for i in range(1, n + 1)]
    k = [d / gi_hat[i - 1] if gi_hat[i - 1] != 0 else None
         for i, d in enumerate(deltas, start=1)]
    scale = abs(gi_hat[0]) if gi_hat[0] != 0 else 1.0
    telescoping = abs(gi_hat[0] - (gi_hat[n] + sum(deltas))) / scale
    product = 0.0
    running = gi_hat[0]
    for i, ki in enumerate(k, start=1):
        if ki is None:
            break
        running *= 1.0 - ki
        product = max(product, abs(running - gi_hat[i]) / scale)
    return deltas, k, telescoping, product


def residual_chain_report(artifact: StageArtifact, X, kind=LossKind.L2LOGIT, t=1.0,
                          layer_stats=True) -> GiReport:
    """GI-hat per stage plus deltas, k factors and per-layer bound diagnostics."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DomainError("probe set must be a non-empty 2-D array")
    if artifact.n < 1:
        raise DomainError("artifact has no res-students")
    gi_hat = [gi_hat_stage(artifact, X, i) for i in range(artifact.n + 1)]
    deltas, k, telescoping, product = chain_identities(gi_hat)
    for i, d in enumerate(deltas, start=1):
        if d < 0:
            log.warning("stage %d increased the distance to the teacher (delta %.3g)", i, d)
    stages = [_stage_stats(artifact, X, i, kind, t) for i in range(artifact.n + 1)] if layer_stats else []
    c_max = max((s.c_max for s in stages), default=float("nan"))
    return GiReport(gi_hat, deltas, k, telescoping, product, c_max, stages)


# ---------------------------------------------------------------- PCA

@dataclass
class PcaProjection:
    coords: np.ndarray          # (N, 2)
    axes: np.ndarray            # (2, K), rows orthonormal unless degenerate
    explained_variance: np.ndarray
    mean: np.ndarray
    degenerate: tuple

    def project(self, points):
        return (np.asarray(points, dtype=np.float64) - self.mean) @ self.axes.T


def _top_eigvec(C, basis, tol=1e-13, max_iter=20000, seed=0):
    """Dominant eigenpair of symmetric PSD ``C`` restricted to the complement of ``basis``."""
    v = np.random.default_rng(seed).standard_normal(C.shape[0])
    for b in basis:
        v -= (v @ b) * b
    v /= np.linalg.norm(v)
    scale = np.trace(C)
    lam = 0.0
    for _ in range(max_iter):
        w = C @ v
        for b in basis:
            w -= (w @ b) * b
        lam = float(v @ w)
        if np.linalg.norm(w - lam * v) <= tol * scale:
            break
        norm = np.linalg.norm(w)
        if norm == 0:
            break
        v = w / norm
    return lam, v


def _sign_normalize(v):
    return v if v[np.argmax(np.abs(v))] >= 0 else -v


def pca2d(points) -> PcaProjection:
    """Project points onto their top two principal axes."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DomainError("PCA needs at least two points")
    n, k = X.shape
    mean = X.mean(axis=0)
    Xc = X - mean
    C = Xc.T @ Xc / (n - 1)
    total = float(np.trace(C))
    tiny = (1e-12 * max(1.0, float(np.max(np.abs(X))))) ** 2 * k
    if total <= tiny:
        axes = np.zeros((2, k))
        return PcaProjection(np.zeros((n, 2)), axes, np.zeros(2), mean, (True, True))

    lam1, v1 = _top_eigvec(C, [])
    v1 = _sign_normalize(v1)
    axes = [v1]
    explained = [lam1]
    degenerate = [False, False]
    if k < 2:
        axes.append(np.zeros(k))
        explained.append(0.0)
        degenerate[1] = True
    else:
        lam2, v2 = _top_eigvec(C, [v1])
        if lam2 <= 1e-14 * total:
            # no variance left: any unit vector orthogonal to v1 will do
            e = np.eye(k)[np.argmin(np.abs(v1))]
            v2 = e - (e @ v1) * v1
            v2 /= np.linalg.norm(v2)
            lam2 = 0.0
        axes.append(_sign_normalize(v2))
        explained.append(max(lam2, 0.0))
    axes = np.array(axes)
    return PcaProjection(Xc @ axes.T, axes, np.array(explained), mean, tuple(degenerate))
