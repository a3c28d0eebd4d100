"""Time im2col and col2im on both kernel backends and check they agree bitwise.

Usage: python benchmarks/bench_kernels.py [--repeat N]

The compiled backend is optional; when the extension is not built only the
pure-Python numbers are printed.
"""
from __future__ import annotations

import argparse
import importlib
import timeit

import numpy as np

from mdil import _kernels_py

CASES = [
    # (N, C, H, W, k, stride)
    (8, 3, 64, 64, 3, 2),
    (8, 16, 32, 32, 3, 1),
    (8, 32, 16, 16, 3, 1),
    (8, 64, 8, 8, 3, 1),
    (8, 16, 32, 32, 4, 2),
]


def backends():
    out = {"python": _kernels_py}
    try:
        out["compiled"] = importlib.import_module("mdil._kernels")
    except ImportError:
        pass
    return out


def bench(mod, case, repeat: int) -> tuple[float, float]:
    n, c, h, w, k, s = case
    pad = (k - 1) // 2
    x = np.random.default_rng(0).standard_normal((n, c, h, w)).astype(np.float32)
    cols = mod.im2col(x, k, k, s, pad)
    t_fwd = min(timeit.repeat(lambda: mod.im2col(x, k, k, s, pad), number=5, repeat=repeat)) / 5
    t_bwd = min(timeit.repeat(lambda: mod.col2im(cols, x.shape, k, k, s, pad), number=5, repeat=repeat)) / 5
    return t_fwd, t_bwd


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    mods = backends()
    if "compiled" not in mods:
        print("compiled backend not built; showing the pure-Python backend only")
    print(f"{'case (N,C,H,W,k,s)':<26}" + "".join(f"{b + ' im2col':>18}{b + ' col2im':>18}" for b in mods))
    for case in CASES:
        line = f"{str(case):<26}"
        for mod in mods.values():
            f, b = bench(mod, case, args.repeat)
            line += f"{f * 1e3:>15.3f} ms{b * 1e3:>15.3f} ms"
        print(line)
    if len(mods) == 2:
        x = np.random.default_rng(1).standard_normal((4, 8, 16, 16)).astype(np.float32)
        a = mods["python"].im2col(x, 3, 3, 1, 1)
        b = mods["compiled"].im2col(x, 3, 3, 1, 1)
        print("backends agree bitwise:", bool(np.array_equal(a, b)))


if __name__ == "__main__":
    main()
