"""Compiled vs. numpy kernels: spline interpolation and cloud-in-cell deposit.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from kraichnan_lab import kernels

CASES = [
    # (name, d, n, particles, fields)
    ("1d n=256", 1, 256, 100_000, 1),
    ("2d n=128", 2, 128, 10_000, 2),
]


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels._ext is None:
        print("compiled extension not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14}{'case':<12}{'python [ms]':>13}{'cython [ms]':>13}{'speedup':>10}{'max diff':>11}")
    for name, d, n, N, m in CASES:
        dx = 32.0 / n
        coeffs = rng.standard_normal((m,) + (n,) * d)
        x = rng.uniform(-40, 40, size=(N, d))
        for kname, fn in (
            ("spline_eval", lambda b: kernels.spline_eval(coeffs, x, dx, backend=b)),
            ("deposit_cic", lambda b: kernels.deposit_cic(x, dx, (n,) * d, backend=b)),
        ):
            res = {}
            for b in ("python", "cython"):
                if b == "cython" and kernels._ext is None:
                    continue
                fn(b)
                res[b] = (min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) * 1e3, fn(b))
            py = res["python"]
            if "cython" in res:
                cy = res["cython"]
                diff = float(np.abs(py[1] - cy[1]).max())
                print(f"{kname:<14}{name:<12}{py[0]:>13.2f}{cy[0]:>13.2f}{py[0] / cy[0]:>9.1f}x{diff:>11.1e}")
            else:
                print(f"{kname:<14}{name:<12}{py[0]:>13.2f}{'-':>13}{'-':>10}{'-':>11}")


if __name__ == "__main__":
    main()
