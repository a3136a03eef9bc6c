"""Backend selection for the elementwise hot kernels.

The compiled extension is used when it imports; set ``GPP_PURE_PYTHON=1`` to
force the numpy fallback. ``BACKEND`` names the active choice.
"""

import os

import numpy as np

from . import _kernels_py

_ext = None
if os.environ.get("GPP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _ext
    except ImportError:
        _ext = None

if _ext is not None:
    BACKEND = "cython"
    _adam = _ext.adam_update
    _relu_backward = _ext.relu_backward
    _softmax_xent = _ext.softmax_xent
else:
    BACKEND = "python"
    _adam = _kernels_py.adam_update
    _relu_backward = _kernels_py.relu_backward
    _softmax_xent = _kernels_py.softmax_xent


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    if _ext is None:
        _adam(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2)
    else:
        # compiled kernel works on flat contiguous views
        for arr in (param, m, v):
            if not arr.flags.c_contiguous:
                raise ValueError("adam_update needs C-contiguous state arrays")
        grad = np.ascontiguousarray(grad, dtype=np.float64)
        _adam(param.reshape(-1), grad.reshape(-1), m.reshape(-1), v.reshape(-1),
              lr, beta1, beta2, eps, bc1, bc2)


def relu_backward(dout, pre):
    if _ext is None:
        return _relu_backward(dout, pre)
    return _relu_backward(np.ascontiguousarray(dout), np.ascontiguousarray(pre))


def softmax_xent(logits, labels, clamp=1e-12):
    if _ext is None:
        return _softmax_xent(logits, labels, clamp)
    return _softmax_xent(np.ascontiguousarray(logits, dtype=np.float64),
                         np.ascontiguousarray(labels, dtype=np.int64), clamp)
