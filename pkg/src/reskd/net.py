"""Bias-free MLP with explicit forward/backward passes and an SGD optimizer.

Layer ``l`` (1-based) computes ``h_l = a_{l-1} @ W_l.T`` and
``a_l = act(h_l)``; the last layer is linear so logits are unbounded.
Batches are row-major: one sample per row.
"""
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .errors import DivergenceError, DomainError, ShapeError, TraceError

ACTIVATIONS = ("tanh", "relu")


@dataclass(eq=False)
class Mlp:
    widths: List[int]
    activation: str
    weights: List[np.ndarray]
    # bumped on every in-place update so old traces can be detected
    version: int = field(default=0, repr=False)

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ShapeError("an MLP needs at least one layer (two widths)")
        if any(int(w) < 1 for w in self.widths):
            raise ShapeError(f"all widths must be >= 1, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")
        self.widths = [int(w) for w in self.widths]
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        if len(self.weights) != self.num_layers:
            raise ShapeError(
                f"expected {self.num_layers} weight matrices, got {len(self.weights)}")
        for l, w in enumerate(self.weights, start=1):
            expected = (self.widths[l], self.widths[l - 1])
            if w.shape != expected:
                raise ShapeError(f"layer {l}: weight shape {w.shape} != {expected}")

    @property
    def num_layers(self):
        return len(self.widths) - 1

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def copy(self):
        return Mlp(list(self.widths), self.activation, [w.copy() for w in self.weights])

    def __call__(self, batch):
        return forward(self, batch)[0]


def init_mlp(widths, activation="tanh", rng=None):
    """Glorot-uniform initialization, U(-b, b) with b = sqrt(6 / (fan_in + fan_out))."""
    rng = np.random.default_rng(rng)
    weights = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
    return Mlp(list(widths), activation, weights)


@dataclass
class ActivationTrace:
    """Per-layer pre-activations ``pre[l-1] = h_l`` and post-activations
    ``post[l] = a_l`` (``post[0]`` is the input batch)."""
    pre: List[np.ndarray]
    post: List[np.ndarray]
    net_id: int
    net_version: int

    @property
    def num_layers(self):
        return len(self.pre)

    @property
    def batch_size(self):
        return self.post[0].shape[0]


@dataclass
class LayerGrads:
    weights: List[np.ndarray]
    # per-sample gradient of the loss w.r.t. the logits, shape (N, M_L)
    out_grad: np.ndarray


def _act(kind, h):
    if kind == "tanh":
        return np.tanh(h)
    return np.maximum(h, 0.0)


def _act_deriv(kind, h):
    if kind == "tanh":
        return 1.0 - np.tanh(h) ** 2
    # relu'(0) is defined as 0
    return (h > 0).astype(np.float64)


def forward(net: Mlp, batch):
    """Return ``(logits, trace)`` for a batch of shape (N, M_0)."""
    a = np.asarray(batch, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != net.in_dim:
        raise ShapeError(
            f"layer 1: input has shape {a.shape}, expected (N, {net.in_dim})")
    pre, post = [], [a]
    last = net.num_layers
    for l, w in enumerate(net.weights, start=1):
        if a.shape[1] != w.shape[1]:
            raise ShapeError(f"layer {l}: got {a.shape[1]} inputs, weight expects {w.shape[1]}")
        h = a @ w.T
        a = h if l == last else _act(net.activation, h)
        pre.append(h)
        post.append(a)
    return a, ActivationTrace(pre, post, id(net), net.version)


def _check_trace(net, trace):
    if trace.net_id != id(net) or trace.net_version != net.version:
        raise TraceError("activation trace was not produced by the current state of this network")
    if trace.num_layers != net.num_layers:
        raise TraceError(
            f"trace has {trace.num_layers} layers, network has {net.num_layers}")


def backward(net: Mlp, trace: ActivationTrace, dL_dlogits) -> LayerGrads:
    """Batch-mean weight gradients given per-sample dL/dlogits rows."""
    _check_trace(net, trace)
    g = np.asarray(dL_dlogits, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    n = trace.batch_size
    if g.shape != (n, net.out_dim):
        raise ShapeError(f"dL_dlogits shape {g.shape} != {(n, net.out_dim)}")
    grads = [None] * net.num_layers
    delta = g
    for l in range(net.num_layers, 0, -1):
        if l < net.num_layers:
            delta = delta * _act_deriv(net.activation, trace.pre[l - 1])
        grads[l - 1] = delta.T @ trace.post[l - 1] / n
        if l > 1:
            delta = delta @ net.weights[l - 1]
    return LayerGrads(grads, g.copy())


def sgd_step(net: Mlp, grads: LayerGrads, lr, momentum=0.0, weight_decay=0.0, state=None):
    """One momentum-SGD update, applied in place.

    ``v <- momentum * v + (grad + weight_decay * W)``, ``W <- W - lr * v``.
    Returns ``(net, state)`` where state is the list of velocity buffers.
    """
    if not lr > 0:
        raise DomainError(f"lr must be > 0, got {lr}")
    if not 0 <= momentum < 1:
        raise DomainError(f"momentum must be in [0, 1), got {momentum}")
    if not weight_decay >= 0:
        raise DomainError(f"weight_decay must be >= 0, got {weight_decay}")
    for l, g in enumerate(grads.weights, start=1):
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in layer {l}")
    if state is None:
        state = [np.zeros_like(w) for w in net.weights]
    for w, g, v in zip(net.weights, grads.weights, state):
        v *= momentum
        v += g + weight_decay * w
        w -= lr * v
    net.version += 1
    return net, state


def softmax_t(logits, t=1.0):
    """Temperature softmax over the last axis, max-shifted for stability."""
    if not t > 0:
        raise DomainError(f"temperature must be > 0, got {t}")
    z = np.asarray(logits, dtype=np.float64) / t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_t(logits, t=1.0):
    if not t > 0:
        raise DomainError(f"temperature must be > 0, got {t}")
    z = np.asarray(logits, dtype=np.float64) / t
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def activation_deriv_diag(net: Mlp, trace: ActivationTrace, l: int):
    """Diagonal of Sigma'_l for every sample, shape (N, M_l).

    The output layer is linear, so its derivative is all ones.
    """
    _check_trace(net, trace)
    if not 1 <= l <= net.num_layers:
        raise IndexError(f"layer {l} out of range 1..{net.num_layers}")
    h = trace.pre[l - 1]
    if l == net.num_layers:
        return np.ones_like(h)
    return _act_deriv(net.activation, h)


def pi_matrix(net: Mlp, trace: ActivationTrace, sample: int, l: int):
    """Back-propagation operator from the logits to layer ``l``'s pre-activations.

    Pi_l = (prod_{i=l}^{L-1} Sigma'_i theta_{i+1}^T) Sigma'_L, shape (M_l, M_L),
    so that the per-sample layer-l gradient is ``outer(Pi_l @ dL/da_L, a_{l-1})``.
    """
    _check_trace(net, trace)
    if not 0 <= sample < trace.batch_size:
        raise IndexError(f"sample {sample} out of range 0..{trace.batch_size - 1}")
    L = net.num_layers
    if not 1 <= l <= L:
        raise IndexError(f"layer {l} out of range 1..{L}")
    pi = np.diag(activation_deriv_diag(net, trace, L)[sample])
    for i in range(L - 1, l - 1, -1):
        d = activation_deriv_diag(net, trace, i)[sample]
        pi = (d[:, None] * net.weights[i].T) @ pi
    return pi
