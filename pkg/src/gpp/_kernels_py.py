"""Pure numpy implementations of the elementwise hot kernels.

These are the reference versions. The compiled extension ``gpp._ckernels``
exposes the same functions and must agree with these bit for bit.
"""

import numpy as np


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """In-place bias-corrected Adam update of ``param``, ``m`` and ``v``.

    ``bc1`` and ``bc2`` are the bias-correction denominators ``1 - beta**t``.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def relu_backward(dout, pre):
    """Gradient through ReLU: ``dout`` where ``pre > 0`` else 0 (new array)."""
    return np.where(pre > 0.0, dout, 0.0)


def softmax_xent(logits, labels, clamp):
    """Fused softmax + mean cross-entropy.

    Returns ``(probs, loss, grad_logits)`` where ``grad_logits = (p - onehot) / n``.
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    n = probs.shape[0]
    rows = np.arange(n)
    picked = np.clip(probs[rows, labels], clamp, 1.0)
    loss = float(-np.log(picked).sum() / n)
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    grad /= n
    return probs, loss, grad
