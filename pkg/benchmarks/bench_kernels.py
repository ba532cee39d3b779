"""Compiled vs numpy kernels: im2col, col2im and 2x2 max pooling.

Run ``python3 benchmarks/bench_kernels.py [--repeat N]``. Shapes follow the
toy FCN on 64x64 inputs (batch 5) plus one full-width VGG block.
"""
import argparse
import importlib
import timeit

import numpy as np

SHAPES = [
    ("toy conv1 64x64", (5, 8, 64, 64), 3, 1, 1),
    ("toy conv3 16x16", (5, 32, 16, 16), 3, 1, 1),
    ("toy fc6 2x2 k7", (5, 64, 2, 2), 7, 1, 3),
    ("full conv2 128x256", (1, 64, 128, 256), 3, 1, 1),
]


def _time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    backends = {"numpy": importlib.import_module("caepl._kernels_py")}
    try:
        backends["cython"] = importlib.import_module("caepl._ckernels")
    except ImportError:
        print("compiled kernels not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'case':<22}{'kernel':<10}" + "".join(f"{b + ' ms':>12}" for b in backends)
          + ("    speedup" if len(backends) == 2 else ""))
    for label, shape, k, s, pad in SHAPES:
        x = rng.standard_normal(shape).astype(np.float32)
        cols = backends["numpy"].im2col(x, k, k, s, pad)
        pooled, idx = backends["numpy"].maxpool2x2_forward(x)
        cases = {
            "im2col": lambda m: m.im2col(x, k, k, s, pad),
            "col2im": lambda m: m.col2im(cols, x.shape, k, k, s, pad),
            "pool fwd": lambda m: m.maxpool2x2_forward(x),
            "pool bwd": lambda m: m.maxpool2x2_backward(pooled, idx, x.shape),
        }
        for name, call in cases.items():
            ms = {b: _time(lambda m=m: call(m), args.repeat) for b, m in backends.items()}
            line = f"{label:<22}{name:<10}" + "".join(f"{v:>12.3f}" for v in ms.values())
            if len(ms) == 2:
                line += f"{ms['numpy'] / ms['cython']:>10.2f}x"
            print(line)


if __name__ == "__main__":
    main()
