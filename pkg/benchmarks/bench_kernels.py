"""Numba vs numpy timings for the quantization and packing kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--end-to-end]

Kernel timings run both backends in this process. ``--end-to-end`` also
times a quantized forward pass of the default-size student twice, once in a
child process with ``QDAED_DISABLE_NUMBA=1``.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from qdaed import kernels
from qdaed._accel import HAVE_NUMBA


def best_of(fn, repeat):
    fn()  # warm-up (includes JIT compilation)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(rng):
    w = rng.standard_normal((1024, 320)).astype(np.float32)
    x = rng.standard_normal((64, 320)).astype(np.float32)
    lo, hi = float(w.min()), float(w.max())
    codes = rng.integers(0, 16, size=w.size, dtype=np.uint32)
    payload = kernels.numpy_impl.pack(codes, 4)
    return {
        "fq_range 1024x320 8-bit": lambda k: k.fq_range(w, lo, hi - lo, 255),
        "codes_range 1024x320 4-bit": lambda k: k.codes_range(w, lo, hi - lo, 15),
        "fq_rows 64x320 8-bit": lambda k: k.fq_rows(x, 255),
        "pack 327680 codes 4-bit": lambda k: k.pack(codes, 4),
        "unpack 327680 codes 4-bit": lambda k: k.unpack(payload, 4, codes.size),
    }


FORWARD_SNIPPET = """
import time, numpy as np
from qdaed.lstm import init_student, forward_batch
from qdaed.quantization import Quantizer
s = init_student(256, 64, 3, seed=0)
X = np.random.default_rng(0).standard_normal((16, 200, 64)).astype(np.float32)
q = Quantizer(8)
forward_batch(s, X[:2, :5], q)
t = time.perf_counter(); forward_batch(s, X, q); print(time.perf_counter() - t)
"""


def end_to_end():
    out = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, QDAED_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", FORWARD_SNIPPET], env=env, capture_output=True, text=True, check=True)
        out[label] = float(res.stdout.split()[-1])
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()
    if not HAVE_NUMBA:
        print("numba is not importable; only the numpy backend can be timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':30} {'numpy (ms)':>11} {'numba (ms)':>11} {'speed-up':>9}")
    for name, call in kernel_cases(rng).items():
        t_np = best_of(lambda: call(kernels.numpy_impl), args.repeat)
        t_nb = best_of(lambda: call(kernels.numba_impl), args.repeat)
        print(f"{name:30} {1e3 * t_np:11.3f} {1e3 * t_nb:11.3f} {t_np / t_nb:8.2f}x")
    if args.end_to_end:
        t = end_to_end()
        print(f"quantized forward, B=16 T=200 H=256: numba {t['numba']:.3f} s, numpy {t['numpy']:.3f} s")


if __name__ == "__main__":
    main()
