"""Compare the compiled kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Shapes follow the desk-scale model: 64 images x 17 tokens, width 64 (LN),
attention rows of 17 over 4 heads, MLP hidden width 256.
"""
from __future__ import annotations

import argparse
import json
import platform
import timeit

import numpy as np

from ceat.autodiff import _pykernels

try:
    from ceat.autodiff import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(dtype):
    rng = np.random.default_rng(0)
    rows, d = 64 * 17, 64
    x = rng.normal(size=(rows, d)).astype(dtype)
    g = rng.normal(size=d).astype(dtype)
    b = rng.normal(size=d).astype(dtype)
    att = rng.normal(size=(64 * 4 * 17, 17)).astype(dtype)
    h = rng.normal(size=rows * 256).astype(dtype)
    gy_att = rng.normal(size=att.shape).astype(dtype)
    gy_h = rng.normal(size=h.shape).astype(dtype)

    def prep(mod):
        _, xhat, rstd = mod.layernorm_forward(x, g, b, 1e-5)
        y = mod.softmax_forward(att)
        return xhat, rstd, y

    def build(mod):
        xhat, rstd, y = prep(mod)
        return {
            "layernorm_forward": lambda: mod.layernorm_forward(x, g, b, 1e-5),
            "layernorm_backward": lambda: mod.layernorm_backward(x, xhat, rstd, g),
            "softmax_forward": lambda: mod.softmax_forward(att),
            "softmax_backward": lambda: mod.softmax_backward(y, gy_att),
            "gelu_forward": lambda: mod.gelu_forward(h),
            "gelu_backward": lambda: mod.gelu_backward(h, gy_h),
        }

    return build


def bench(repeat: int) -> dict:
    results = {"python": platform.python_version(), "numpy": np.__version__, "kernels": {}}
    for dtype in (np.float32, np.float64):
        build = cases(dtype)
        backends = {"numpy": build(_pykernels)}
        if _ckernels is not None:
            backends["cython"] = build(_ckernels)
        for name in backends["numpy"]:
            row = {}
            for backend, fns in backends.items():
                t = timeit.Timer(fns[name])
                n, _ = t.autorange()
                row[backend] = min(t.repeat(repeat, n)) / n * 1e6
            if "cython" in row:
                row["speedup"] = row["numpy"] / row["cython"]
            results["kernels"][f"{name}[{np.dtype(dtype).name}]"] = row
    return results


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args()
    res = bench(args.repeat)
    print(f"{'kernel':32s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for name, row in res["kernels"].items():
        cy = f"{row['cython']:10.1f}" if "cython" in row else f"{'n/a':>10s}"
        sp = f"{row['speedup']:8.2f}" if "speedup" in row else f"{'':>8s}"
        print(f"{name:32s} {row['numpy']:10.1f} {cy} {sp}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(res, f, indent=2)


if __name__ == "__main__":
    main()
