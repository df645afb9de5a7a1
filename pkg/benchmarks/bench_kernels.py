"""Compare the compiled and numpy kernel backends on representative shapes.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--format csv|json]
"""

import argparse
import json
import sys
import timeit

import numpy as np

from csefsl.nn.kernels import available_backends, get_backend

CASES = [
    # name, batch, in_ch, hw, out_ch, kernel
    ("cifar_conv1", 8, 3, 28, 64, 5),
    ("cifar_conv2", 8, 64, 16, 64, 5),
    ("femnist_conv2", 8, 32, 26, 64, 3),
    ("small_conv", 32, 1, 10, 4, 3),
]


def _inputs(batch, cin, hw, cout, k, seed=0):
    rng = np.random.default_rng(seed)
    xp = rng.normal(size=(batch, cin, hw, hw))
    w = rng.normal(size=(cout, cin, k, k))
    out_hw = hw - k + 1
    dout = rng.normal(size=(batch, cout, out_hw, out_hw))
    return xp, w, dout


def bench(repeat):
    rows = []
    backends = available_backends()
    for name, batch, cin, hw, cout, k in CASES:
        xp, w, dout = _inputs(batch, cin, hw, cout, k)
        pool_in = np.random.default_rng(1).normal(size=(batch, cout, hw - k + 1, hw - k + 1))
        ops = {
            "conv_fwd": lambda m: m.conv2d_forward(xp, w, 1),
            "conv_bwd": lambda m: m.conv2d_backward(xp, w, dout, 1),
            "pool_fwd": lambda m: m.maxpool_forward(pool_in, 2, 2),
        }
        for op, fn in ops.items():
            row = {"case": name, "op": op}
            results = {}
            for backend in backends:
                mod = get_backend(backend)
                results[backend] = fn(mod)
                row[f"{backend}_ms"] = 1e3 * min(timeit.repeat(lambda: fn(mod), number=1, repeat=repeat))
            if len(results) == 2:
                a, b = results["cython"], results["python"]
                a, b = (a if isinstance(a, tuple) else (a,)), (b if isinstance(b, tuple) else (b,))
                row["max_abs_diff"] = max(float(np.max(np.abs(np.asarray(x, float) - np.asarray(y, float))))
                                          for x, y in zip(a, b))
                row["speedup"] = row["python_ms"] / row["cython_ms"]
            rows.append(row)
    return rows


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--format", choices=("csv", "json"), default="csv")
    args = parser.parse_args()
    rows = bench(args.repeat)
    if args.format == "json":
        json.dump(rows, sys.stdout, indent=1)
        print()
        return
    cols = list(rows[0])
    print(",".join(cols))
    for r in rows:
        print(",".join(f"{r[c]:.4g}" if isinstance(r[c], float) else str(r[c]) for c in cols))


if __name__ == "__main__":
    main()
