"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--dtype float32]

Both backends are imported directly, so the environment switch that picks the
active one does not matter here.  Outputs are cross-checked before timing.
"""
import argparse
import timeit

import numpy as np

from ekgnet import _kernels_py as py

try:
    from ekgnet import _kernels as cy
except ImportError:  # extension not built
    cy = None


def cases(dtype, rng):
    # a mid-network dense-layer conv: 16 -> 8 channels, 3^3 kernel, 4 groups
    b, c, o, g = 16, 16, 8, 4
    out = (22, 7, 7)
    xp = rng.standard_normal((b, c) + tuple(n + 2 for n in out)).astype(dtype)
    w = rng.standard_normal((o, c // g, 3, 3, 3)).astype(dtype)
    go = rng.standard_normal((b, o) + out).astype(dtype)
    cols = rng.standard_normal((b, c, 3, 3, 3) + out).astype(dtype)
    pool_in = rng.standard_normal((b, 32, 24, 7, 7)).astype(dtype)
    pool_g = rng.standard_normal((b, 32, 12, 4, 4)).astype(dtype)
    one = (1, 1, 1)
    return {
        "conv3d_fwd": lambda m: m.conv3d_fwd(xp, w, g, one, out),
        "conv3d_bwd_data": lambda m: m.conv3d_bwd_data(go, w, g, one, xp.shape[2:]),
        "conv3d_bwd_weight": lambda m: m.conv3d_bwd_weight(go, xp, g, (3, 3, 3), one),
        "col2vol": lambda m: m.col2vol(cols, xp.shape[2:], one, one),
        "avg_pool3d_forward": lambda m: m.avg_pool3d_forward(pool_in, 2),
        "avg_pool3d_backward": lambda m: m.avg_pool3d_backward(pool_g, pool_in.shape[2:], 2),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = ap.parse_args()
    tol = 1e-3 if args.dtype == "float32" else 1e-9

    print(f"{'kernel':<22}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, fn in cases(np.dtype(args.dtype), np.random.default_rng(0)).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        if cy is None:
            print(f"{name:<22}{t_py:>12.2f}{'n/a':>14}{'':>10}")
            continue
        diff = float(np.abs(np.asarray(fn(cy)) - fn(py)).max())
        if diff > tol:
            raise SystemExit(f"{name}: backends disagree by {diff:.3g}")
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<22}{t_py:>12.2f}{t_cy:>14.2f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
