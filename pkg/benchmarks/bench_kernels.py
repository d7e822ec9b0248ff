"""Time the numba and numpy kernel backends on model-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from dsclrcn import _kernels
from dsclrcn import layers as L
from dsclrcn import model as net


def cases(rng):
    x = rng.normal(size=(20, 64, 64, 16))
    w = rng.normal(size=(32, 16, 3, 3))
    b = np.zeros(32)
    out, cache = L.conv2d_forward(x, w, b, 1, 2, "relu")
    maps = rng.normal(size=(20, 8, 8))
    up = rng.normal(size=(20, 64, 64))
    big = rng.uniform(size=(480, 640))
    cfg = net.toy_model_config()
    params = net.init_params(cfg, 0)
    imgs = rng.uniform(size=(20, 64, 64, 3))
    return {
        "conv fwd 20x64x64x16->32 d2": lambda: L.conv2d_forward(x, w, b, 1, 2, "relu"),
        "conv bwd": lambda: L.conv2d_backward(np.ones_like(out), cache),
        "upsample x8 20x8x8": lambda: L.upsample_forward(maps, 8),
        "upsample bwd": lambda: L.upsample_backward(up, 8),
        "blur 480x640 sigma 16.8": lambda: L.gaussian_blur(big, 16.8),
        "toy model fwd batch 20": lambda: net.forward(params, cfg, imgs),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    jobs = cases(rng)
    names = [n for n in ("numpy", "numba") if n in _kernels.BACKENDS]
    timings = {}
    for backend in names:
        _kernels.set_backend(backend)
        for label, fn in jobs.items():
            fn()  # warm-up, includes JIT compilation
            timings[label, backend] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    print(f"{'case':32s}" + "".join(f"{n:>12s}" for n in names) + ("     speedup" if len(names) == 2 else ""))
    for label in jobs:
        row = [timings[label, n] for n in names]
        line = f"{label:32s}" + "".join(f"{t * 1e3:10.2f}ms" for t in row)
        if len(row) == 2:
            line += f"{row[0] / row[1]:11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
