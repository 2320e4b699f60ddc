"""Time every kernel under the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--rows 4096] [--dim 256] [--repeat 20] [--csv out.csv]
"""
import argparse
import csv
import sys
import timeit

import numpy as np

from deit import _kernels as K


def cases(rows, dim, rng):
    x = rng.standard_normal((rows, dim)).astype(np.float32)
    g = rng.standard_normal((rows, dim)).astype(np.float32)
    w = np.ones(dim, np.float32)
    b = np.zeros(dim, np.float32)
    y = K.np_softmax_fwd(x)
    logp = K.np_log_softmax_fwd(x)
    _, xhat, rstd = K.np_layernorm_fwd(x, w, b, 1e-6)
    _, cdf = K.np_gelu_fwd(x)
    img = rng.standard_normal((8, 16, 32, 32)).astype(np.float32)
    cols = K.np_im2col(img, 3, 1, 1)
    return {
        "softmax_fwd": (x,), "softmax_bwd": (y, g),
        "log_softmax_fwd": (x,), "log_softmax_bwd": (logp, g),
        "layernorm_fwd": (x, w, b, 1e-6), "layernorm_bwd": (g, xhat, rstd, w),
        "gelu_fwd": (x,), "gelu_bwd": (x, cdf, g),
        "im2col": (img, 3, 1, 1), "col2im": (cols, img.shape, 3, 1, 1),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--dim", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    if K.NUMBA_KERNELS is None:
        print("numba unavailable; only the numpy path can be timed", file=sys.stderr)
    data = cases(args.rows, args.dim, np.random.default_rng(0))
    rows = []
    for name, inputs in data.items():
        row = {"kernel": name}
        nb = K.NUMBA_KERNELS or {}
        # the numba registry dispatches some kernels to numpy; time the compiled loop too
        fns = {"numpy": K.NUMPY_KERNELS[name], "numba": nb.get(f"{name}_loop", nb.get(name))}
        for backend, fn in fns.items():
            if fn is None:
                row[backend] = float("nan")
                continue
            fn(*inputs)  # compile / warm caches
            row[backend] = min(timeit.repeat(lambda: fn(*inputs), number=1, repeat=args.repeat))
        row["speedup"] = row["numpy"] / row["numba"]
        row["dispatch"] = "numpy" if nb.get(name) is K.NUMPY_KERNELS[name] else "numba"
        rows.append(row)
        print(f"{name:18s} numpy {1e3 * row['numpy']:8.3f} ms   numba {1e3 * row['numba']:8.3f} ms"
              f"   x{row['speedup']:.2f}   dispatch={row['dispatch']}")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=["kernel", "numpy", "numba", "speedup", "dispatch"])
            wr.writeheader()
            wr.writerows(rows)


if __name__ == "__main__":
    main()
