"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Sizes mirror the training loop: N=256 generated points against M=1024 data
points for the nearest-neighbour term, and the N x N pair ratio.
"""

import argparse
import timeit

import numpy as np

from bdsg import _kernels


def cases(rng):
    z = rng.standard_normal((256, 2))
    x = rng.standard_normal((256, 2))
    data = rng.standard_normal((1024, 2))
    big = rng.standard_normal((4096, 2))
    return {
        "nearest 256x1024": lambda impl: impl.nearest(x, data),
        "nearest 4096x4096": lambda impl: impl.nearest(big, big),
        "pair_ratio 256": lambda impl: impl.pair_ratio(z, x, 1e-8),
        "mean_pairwise 1024": lambda impl: impl.mean_pairwise(data),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if _kernels.numba_impl is None:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, fn in cases(rng).items():
        fn(_kernels.numba_impl)   # compile outside the timed region
        t_np = min(timeit.repeat(lambda: fn(_kernels.numpy_impl), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: fn(_kernels.numba_impl), number=1, repeat=args.repeat))
        print(f"{name:<22}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
