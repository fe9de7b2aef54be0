#!/usr/bin/env python3
"""Time the numba kernels against their numpy twins.

Both flavours live side by side in ``pointbert.geometry.kernels``, so one
process can run them on the same inputs. Compilation happens in a warm-up
call that is not timed. Every row also checks that the two flavours agree
bit for bit.

Usage:
    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

To run the whole package on the numpy path instead, set POINTBERT_NUMBA=0.
"""

import argparse
import json
import time

import numpy as np

from pointbert.geometry import kernels as K


def _best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def _same(a, b):
    if isinstance(a, tuple):
        return all(np.array_equal(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def cases(rng):
    cloud = rng.normal(size=(2048, 3))
    batch = rng.normal(size=(16, 256, 3))
    patches = rng.normal(size=(256, 32, 3))
    recon = rng.normal(size=(256, 32, 3))
    return [
        ("fps 2048->64", K.fps_numpy, K.fps_numba, (cloud, 64, 0)),
        ("fps 2048->512", K.fps_numpy, K.fps_numba, (cloud, 512, 0)),
        ("knn 64x2048 k=32", K.knn_numpy, K.knn_numba, (cloud[:64], cloud, 32)),
        ("knn batch 16x256 k=16", K.knn_batch_numpy, K.knn_batch_numba, (batch, batch, 16)),
        ("nearest (chamfer) 256x32x32", K.nearest_batch_numpy, K.nearest_batch_numba, (recon, patches)),
        ("sqdist 512x2048", K.sqdist_numpy, K.sqdist_numba, (cloud[:512], cloud)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write the rows to this file")
    args = ap.parse_args()

    rows = []
    print(f"{'kernel':<30}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}  identical")
    for name, slow, fast, inputs in cases(np.random.default_rng(args.seed)):
        same = _same(slow(*inputs), fast(*inputs))  # doubles as the numba warm-up
        t_np = _best_of(slow, inputs, args.repeat)
        t_nb = _best_of(fast, inputs, args.repeat)
        rows.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb, "identical": same})
        print(f"{name:<30}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>9.1f}x  {same}")

    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    if not all(r["identical"] for r in rows):
        raise SystemExit("numba and numpy kernels disagree")


if __name__ == "__main__":
    main()
