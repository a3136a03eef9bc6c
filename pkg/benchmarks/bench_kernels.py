"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--epoch]

Kernel timings use shapes from desk-scale MNIST-composite training. With
``--epoch`` one synthetic training epoch is also timed under each backend in
a subprocess (the backend is fixed at import time).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from gpp import _kernels_py

try:
    from gpp import _ckernels
except ImportError:
    _ckernels = None

EPOCH_SNIPPET = """
import time
from gpp.data import gen_correlated_synthetic
from gpp.trainer import TrainConfig, GppTrainer
from gpp.kernels import BACKEND
d = gen_correlated_synthetic(4000, 32, 0.0, 0)
t = GppTrainer(d, TrainConfig(d_z=8, epochs=1, lr=1e-3, encoder_hidden=(64, 32),
                              classifier_hidden=(32, 16)))
t0 = time.perf_counter(); t.run(); print(BACKEND, time.perf_counter() - t0)
"""


def cases(rng):
    w = rng.standard_normal((1568, 512))
    g = rng.standard_normal(w.shape)
    pre = rng.standard_normal((64, 512))
    dout = rng.standard_normal(pre.shape)
    logits = rng.standard_normal((64, 19))
    labels = rng.integers(0, 19, 64)

    def adam(mod):
        p, m, v = w.copy(), np.zeros_like(w), np.zeros_like(w)
        if mod is _kernels_py:
            return lambda: mod.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)
        pf, gf, mf, vf = p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1)
        return lambda: mod.adam_update(pf, gf, mf, vf, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)

    return {
        "adam_update 1568x512": adam,
        "relu_backward 64x512": lambda mod: (lambda: mod.relu_backward(dout, pre)),
        "softmax_xent 64x19": lambda mod: (lambda: mod.softmax_xent(logits, labels, 1e-12)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--epoch", action="store_true")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy us':>12}{'cython us':>12}{'speedup':>10}")
    for name, make in cases(rng).items():
        t_py = min(timeit.repeat(make(_kernels_py), number=50, repeat=args.repeat)) / 50
        if _ckernels is None:
            print(f"{name:<24}{t_py * 1e6:>12.1f}{'n/a':>12}")
            continue
        t_c = min(timeit.repeat(make(_ckernels), number=50, repeat=args.repeat)) / 50
        print(f"{name:<24}{t_py * 1e6:>12.1f}{t_c * 1e6:>12.1f}{t_py / t_c:>9.2f}x")
    if args.epoch:
        for flag in ("0", "1"):
            env = dict(os.environ, GPP_PURE_PYTHON=flag)
            out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env,
                                 capture_output=True, text=True, check=True)
            backend, secs = out.stdout.split()
            print(f"one synthetic epoch [{backend}]: {float(secs):.2f} s")


if __name__ == "__main__":
    main()
