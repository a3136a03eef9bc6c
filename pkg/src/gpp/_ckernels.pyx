# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``gpp._kernels_py``.

adam_update and relu_backward reproduce the numpy versions bit for bit:
same operation order, no fused multiply-add (built with -ffp-contract=off).
softmax_xent sums sequentially, so it agrees with numpy only to rounding.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, log

cnp.import_array()


def adam_update(double[::1] param, const double[::1] grad, double[::1] m,
                double[::1] v, double lr, double beta1, double beta2,
                double eps, double bc1, double bc2):
    cdef Py_ssize_t i, n = param.shape[0]
    cdef double one_b1 = 1.0 - beta1
    cdef double one_b2 = 1.0 - beta2
    cdef double g, mi, vi
    with nogil:
        for i in range(n):
            g = grad[i]
            mi = m[i] * beta1
            mi = mi + one_b1 * g
            vi = v[i] * beta2
            vi = vi + one_b2 * (g * g)
            m[i] = mi
            v[i] = vi
            param[i] = param[i] - lr * (mi / bc1) / (sqrt(vi / bc2) + eps)


def relu_backward(const double[:, ::1] dout, const double[:, ::1] pre):
    cdef Py_ssize_t i, j, r = dout.shape[0], c = dout.shape[1]
    out = np.empty((r, c), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(r):
            for j in range(c):
                if pre[i, j] > 0.0:
                    o[i, j] = dout[i, j]
                else:
                    o[i, j] = 0.0
    return out


def softmax_xent(const double[:, ::1] logits, const long[::1] labels, double clamp):
    cdef Py_ssize_t i, j, r = logits.shape[0], c = logits.shape[1]
    probs = np.empty((r, c), dtype=np.float64)
    grad = np.empty((r, c), dtype=np.float64)
    cdef double[:, ::1] p = probs
    cdef double[:, ::1] g = grad
    cdef double mx, tot, q, acc = 0.0
    cdef long lab
    for i in range(r):
        lab = labels[i]
        if lab < 0 or lab >= c:
            raise IndexError(f"label {lab} out of range for {c} classes")
    with nogil:
        for i in range(r):
            mx = logits[i, 0]
            for j in range(1, c):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            tot = 0.0
            for j in range(c):
                p[i, j] = exp(logits[i, j] - mx)
                tot = tot + p[i, j]
            for j in range(c):
                p[i, j] = p[i, j] / tot
                g[i, j] = p[i, j] / r
            lab = labels[i]
            q = p[i, lab]
            if q < clamp:
                q = clamp
            elif q > 1.0:
                q = 1.0
            acc = acc - log(q)
            g[i, lab] = (p[i, lab] - 1.0) / r
    return probs, acc / r, grad
