"""Compiled vs numpy kernels, per kernel and for one training step.

    python benchmarks/bench_kernels.py [--repeat 5] [--size 64]

The numpy backend is what ``plnet`` falls back to when the extension is not
built (or with PLNET_PURE_PYTHON=1).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from plnet import kernels


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(size):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 32, size, size)).astype(np.float32)
    w = rng.standard_normal((16, 32, 3, 3)).astype(np.float32)
    b = np.zeros(16, np.float32)
    g = rng.standard_normal((16, 16, size, size)).astype(np.float32)
    pooled = rng.standard_normal((16, 32, size // 2, size // 2)).astype(np.float32)

    def cases(k):
        cols = k.im2col(x, 3)
        _, arg = k.maxpool2_forward(x)
        return {
            "im2col": lambda: k.im2col(x, 3),
            "col2im": lambda: k.col2im(cols, 32, size, size, 3),
            "maxpool2 fwd": lambda: k.maxpool2_forward(x),
            "maxpool2 bwd": lambda: k.maxpool2_backward(pooled, arg),
            "upsample2 fwd": lambda: k.upsample2_forward(pooled),
            "upsample2 bwd": lambda: k.upsample2_backward(x),
            "conv3x3 fwd": lambda: k.conv3x3_forward(x, w, b),
            "conv3x3 bwd input": lambda: k.conv3x3_backward_input(g, w),
            "conv3x3 bwd weight": lambda: k.conv3x3_backward_weight(x, g),
        }
    return cases


STEP = """
import time, numpy as np
from plnet import kernels
from plnet.arch_graph import NetworkConfig
from plnet.model_runtime import Model
from plnet.nn_ops import Tape, Tensor
from plnet.training import total_loss
size, repeat = {size}, {repeat}
m = Model.from_config(NetworkConfig(input_size=size, ocs=0.25), seed=0)
rng = np.random.default_rng(0)
x = Tensor(rng.random((16, 3, size, size)).astype(np.float32))
y = (rng.random((16, 1, size, size)) > 0.8).astype(np.float32)
params = list(m.parameters().values())
times = []
for _ in range(repeat):
    t = time.perf_counter()
    with Tape() as tape:
        out = m(x)
        loss, _ = total_loss(out.probs, y, "joint", 1.0)
    tape.gradient(loss, params)
    times.append(time.perf_counter() - t)
print(kernels.BACKEND, min(times))
"""


def training_step(size, repeat, pure):
    env = dict(os.environ, PLNET_PURE_PYTHON="1" if pure else "0",
               OPENBLAS_NUM_THREADS="1", OMP_NUM_THREADS="1")
    out = subprocess.run([sys.executable, "-c", STEP.format(size=size, repeat=repeat)],
                         env=env, capture_output=True, text=True, check=True)
    name, secs = out.stdout.split()
    return name, float(secs)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args(argv)

    found = kernels.backends()
    if "cython" not in found:
        print("compiled backend not built; only numpy timings are available")
    tables = {name: kernel_cases(args.size)(mod) for name, mod in found.items()}
    print(f"batch 16, 32->16 channels, {args.size}x{args.size}, best of {args.repeat}, 1 thread")
    print(f"{'kernel':<20}" + "".join(f"{n:>12}" for n in tables) + f"{'speedup':>10}")
    with threadpool_limits(1):
        for case in tables["numpy"]:
            t = {n: best_of(c[case], args.repeat) for n, c in tables.items()}
            row = f"{case:<20}" + "".join(f"{v * 1e3:>10.2f}ms" for v in t.values())
            if "cython" in t:
                row += f"{t['numpy'] / t['cython']:>9.1f}x"
            print(row)

    print(f"\nforward+backward, tiny PL-Net (ocs 0.25), batch 16 at {args.size}x{args.size}")
    step = {}
    for pure in ([False, True] if "cython" in found else [True]):
        name, secs = training_step(args.size, max(2, args.repeat // 2), pure)
        step[name] = secs
        print(f"  {name:<8}{secs:8.3f} s")
    if len(step) == 2:
        print(f"  speedup {step['numpy'] / step['cython']:.2f}x")


if __name__ == "__main__":
    main()
