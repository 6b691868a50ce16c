"""Time compiled vs numpy kernels on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from xdomainmix import _pykernels, kernels


def cases(rng):
    scores = rng.standard_normal((30, 32))
    classes = rng.integers(0, 2, 30)
    domains = np.repeat(np.arange(3), 10)
    u = rng.random((30, 2))
    a = rng.standard_normal((480, 32))
    b = rng.standard_normal((480, 32))
    return {
        "nearest_rank_masks B=30 K=32": lambda m: m.nearest_rank_masks(scores, 16),
        "pair_indices B=30": lambda m: m.pair_indices(classes, domains, u, kernels.DIFF_CLASS_DIFF_DOMAIN),
        "gaussian_kernel_means 480x480x32": lambda m: m.gaussian_kernel_means(a, b, 1.0),
        "median_pairwise_distance 960x32": lambda m: m.median_pairwise_distance(np.vstack([a, b])),
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    compiled = kernels.compiled_module()
    if compiled is None:
        print("compiled extension not built; only the numpy backend is available")
    backends = [("python", _pykernels)] + ([("compiled", compiled)] if compiled else [])
    print(f"{'kernel':<36}" + "".join(f"{name:>14}" for name, _ in backends) + ("      speedup" if compiled else ""))
    for label, fn in cases(np.random.default_rng(0)).items():
        times = []
        for _, mod in backends:
            fn(mod)
            times.append(min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)))
        row = f"{label:<36}" + "".join(f"{t * 1e3:>12.3f}ms" for t in times)
        if compiled:
            row += f"{times[0] / times[1]:>12.1f}x"
        print(row)


if __name__ == "__main__":
    main()
