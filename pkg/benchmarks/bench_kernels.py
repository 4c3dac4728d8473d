"""Time the numba and numpy kernel paths side by side and check they agree.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import time

import numpy as np

from pdelatent import _kernels as K


def cases(rng):
    xp = rng.standard_normal((32, 16, 18, 18))
    cols = rng.standard_normal((32, 16, 16, 16 * 9))
    mask = (rng.random((64, 64)) < 0.05).astype(float)
    members = rng.standard_normal((12, 32 * 32))
    truth = rng.standard_normal(32 * 32)
    field = rng.standard_normal((32, 32))
    ens = rng.standard_normal((16, 32, 32))
    return {
        "im2col": (xp, 3, 3, 1, 16, 16),
        "col2im": (cols, 16, 18, 18, 3, 3, 1),
        "periodic_distance": (mask,),
        "crps_pointwise": (members, truth),
        "neumann_laplacian": (field,),
        "box_smooth": (ens, 2),
    }


def best_time(fn, args, repeat):
    fn(*args)  # warm-up (numba compiles here)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':20s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, a in cases(rng).items():
        tn = best_time(K.NUMPY_KERNELS[name], a, args.repeat)
        tb = best_time(K.NUMBA_KERNELS[name], a, args.repeat)
        diff = np.max(np.abs(K.NUMPY_KERNELS[name](*a) - K.NUMBA_KERNELS[name](*a)))
        print(f"{name:20s} {tn * 1e3:10.3f} {tb * 1e3:10.3f} {tn / tb:8.2f} {diff:10.2e}")


if __name__ == "__main__":
    main()
