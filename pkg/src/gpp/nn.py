"""Minimal dense networks in float64: forward, reverse-mode backward, losses, Adam.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``x`` of shape
``(n, fan_in)`` maps to ``x @ W + b``. A gradient set is a plain list of arrays
in the same order as :meth:`DenseNet.params`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Sequence

import numpy as np

from . import kernels
from .errors import DomainError, NumericError, ShapeError

ACTIVATIONS = ("relu", "identity", "softmax")
PROB_CLAMP = 1e-12

GradientSet = List[np.ndarray]


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")


@dataclass
class DenseNet:
    layers: List[Layer] = field(default_factory=list)

    def __post_init__(self):
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ShapeError(f"layer {i} outputs {a.weight.shape[1]} but layer "
                                 f"{i + 1} expects {b.weight.shape[0]}")
        for layer in self.layers[:-1]:
            if layer.activation == "softmax":
                raise ValueError("softmax is only allowed on the output layer")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def params(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation)
                         for l in self.layers])


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_dense_net(sizes: Sequence[int], rng: np.random.Generator,
                   hidden_activation: str = "relu",
                   output_activation: str = "identity") -> DenseNet:
    """Glorot-uniform weights, zero biases. ``sizes`` lists every layer width
    including input and output."""
    if len(sizes) < 2:
        raise ValueError("need at least an input and an output size")
    layers = []
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = output_activation if i == len(sizes) - 2 else hidden_activation
        layers.append(Layer(glorot_uniform(fi, fo, rng), np.zeros(fo), act))
    return DenseNet(layers)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(pre, 0.0)
    if activation == "softmax":
        return softmax(pre)
    return pre


def _check_input(net: DenseNet, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match net input dim {net.in_dim}")


def forward_cache(net: DenseNet, x: np.ndarray):
    """Forward pass that also returns per-layer ``(input, pre_activation)`` pairs."""
    _check_input(net, x)
    cache = []
    a = x
    for layer in net.layers:
        pre = a @ layer.weight + layer.bias
        cache.append((a, pre))
        a = _activate(pre, layer.activation)
    return a, cache


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    return forward_cache(net, x)[0]


def backward(net: DenseNet, x: np.ndarray, output_grad: np.ndarray, cache=None,
             logits_grad: bool = False, need_input_grad: bool = True):
    """Reverse-mode gradients of a scalar loss through ``net``.

    ``output_grad`` is dL/d(output). With ``logits_grad=True`` it is instead
    taken as dL/d(pre-activation of the last layer), which is what
    :func:`cross_entropy` produces for softmax outputs.

    Returns ``(grads, input_grad)``; ``input_grad`` is None when not requested.
    """
    if cache is None:
        out, cache = forward_cache(net, x)
    else:
        out = _activate(cache[-1][1], net.layers[-1].activation)
    if output_grad.shape != out.shape:
        raise ShapeError(f"output_grad shape {output_grad.shape} != output shape {out.shape}")

    grads: GradientSet = [None] * (2 * len(net.layers))
    delta = output_grad
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        a_in, pre = cache[i]
        last = i == len(net.layers) - 1
        if not (last and logits_grad):
            if layer.activation == "relu":
                delta = kernels.relu_backward(delta, pre)
            elif layer.activation == "softmax":
                p = out
                delta = p * (delta - (delta * p).sum(axis=1, keepdims=True))
        grads[2 * i] = a_in.T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0 or need_input_grad:
            delta = delta @ layer.weight.T
    return grads, (delta if need_input_grad else None)


def cross_entropy(probabilities: np.ndarray, labels) -> tuple:
    """Mean ``-log p[label]`` over the batch and its gradient w.r.t. the logits.

    The gradient ``(p - onehot) / n`` assumes ``probabilities`` came from a
    softmax; pass it to :func:`backward` with ``logits_grad=True``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, c = probabilities.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DomainError(f"label out of range [0, {c})")
    if not np.allclose(probabilities.sum(axis=1), 1.0, rtol=0.0, atol=1e-6):
        raise DomainError("probability rows must sum to 1")
    rows = np.arange(n)
    picked = np.clip(probabilities[rows, labels], PROB_CLAMP, 1.0)
    loss = float(-np.log(picked).sum() / n)
    grad = probabilities.copy()
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple:
    """Fused softmax + cross-entropy on raw logits: ``(probs, loss, grad_logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DomainError(f"label out of range [0, {c})")
    return kernels.softmax_xent(logits, labels, PROB_CLAMP)


def classifier_loss(net: DenseNet, z: np.ndarray, labels, need_input_grad=True):
    """Cross-entropy of a softmax classifier on inputs ``z``.

    Returns ``(loss, grads, dz)``.
    """
    if net.layers[-1].activation != "softmax":
        raise ValueError("classifier nets must end in softmax")
    _check_input(net, z)
    _, cache = forward_cache(net, z)
    _, loss, g = softmax_cross_entropy(cache[-1][1], labels)
    grads, dz = backward(net, z, g, cache=cache, logits_grad=True,
                         need_input_grad=need_input_grad)
    return loss, grads, dz


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params], **kw)

    def copy(self) -> "AdamState":
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v],
                         self.step, self.beta1, self.beta2, self.eps)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState, lr: float) -> AdamState:
    """Apply one Adam update to ``params`` in place and advance ``state``.

    Raises NumericError, leaving everything untouched, if any gradient entry is
    not finite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and Adam state differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ShapeError(f"shape mismatch at parameter {i}: {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {i}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        kernels.adam_update(p, g, m, v, lr, state.beta1, state.beta2, state.eps, bc1, bc2)
    return state


def finite_difference_grad(net: DenseNet, x: np.ndarray,
                           loss_fn: Callable[[np.ndarray], float],
                           h: float = 1e-5) -> GradientSet:
    """Central-difference gradient of ``loss_fn(forward(net, x))`` for every parameter."""
    if h <= 0:
        raise ValueError("h must be positive")
    grads = []
    for p in net.params():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = loss_fn(forward(net, x))
            flat[i] = old - h
            lm = loss_fn(forward(net, x))
            flat[i] = old
            gflat[i] = (lp - lm) / (2.0 * h)
        grads.append(g)
    return grads
