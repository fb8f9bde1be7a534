"""Compiled vs numpy im2col/col2im, plus one full conv forward/backward.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import time

import numpy as np

from repose.netcore import kernels, ops
from repose.netcore.tensor import Tensor

SHAPES = [  # (B, C, H, k, stride): desk-scale trunk, decoder and coarse layers
    (16, 16, 64, 3, 1),
    (16, 16, 64, 3, 2),
    (16, 112, 8, 3, 1),
    (64, 64, 32, 3, 1),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench(repeat):
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'shape':>24} {'op':>8} " + " ".join(f"{b:>10}" for b in backends) + "   speedup")
    for B, C, H, k, s in SHAPES:
        pad = k // 2
        ho = (H + 2 * pad - k) // s + 1
        x = rng.standard_normal((B, C, H, H)).astype(np.float32)
        cols = kernels.im2col(x, k, s, pad, ho, ho, backend="numpy")
        for name, call in (
            ("im2col", lambda b: kernels.im2col(x, k, s, pad, ho, ho, backend=b)),
            ("col2im", lambda b: kernels.col2im(cols, B, C, H, H, k, s, pad, ho, ho, backend=b)),
        ):
            t = {b: best_of(lambda: call(b), repeat) for b in backends}
            ratio = f"{t['numpy'] / t['cython']:8.2f}x" if "cython" in t else ""
            print(f"{str((B, C, H, k, s)):>24} {name:>8} " + " ".join(f"{t[b] * 1e3:8.2f}ms" for b in backends)
                  + "  " + ratio)

    x = Tensor(rng.standard_normal((16, 16, 64, 64)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal((16, 16, 3, 3)).astype(np.float32) * 0.1, requires_grad=True)
    for b in backends:
        kernels.BACKEND = b

        def step():
            x.grad = w.grad = None
            ops.sum_all(ops.conv2d(x, w, None, 1, 1)).backward()

        print(f"conv fwd+bwd 16x16x64x64 [{b}]: {best_of(step, repeat) * 1e3:.1f} ms")


if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=20)
    bench(p.parse_args().repeat)
