"""Time the compiled kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one row per kernel with the best-of-N wall time of each backend and
the speedup, after checking that both backends return identical arrays.
"""

import argparse
import time

import numpy as np

from tumorseg.kernels import available_backends, get_backend


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(rng):
    xp = rng.standard_normal((2, 16, 18, 18, 18))
    cols = rng.standard_normal((2, 16 * 27, 16 ** 3))
    a = rng.random((3000, 3)) * 40
    b = rng.random((3000, 3)) * 40
    vol = rng.standard_normal((4, 32, 32, 32))
    coords = rng.random((3, 32, 32, 32)) * 31
    return {
        "im2col3d 2x16x16^3 k3": lambda k: k.im2col3d(xp, (3, 3, 3), (1, 1, 1)),
        "col2im3d 2x16x16^3 k3": lambda k: k.col2im3d(cols, xp.shape, (3, 3, 3), (1, 1, 1)),
        "min_distances 3000x3000": lambda k: k.min_distances(a, b),
        "resample3d linear 4x32^3": lambda k: k.resample3d(vol, coords, 1, 0.0),
        "resample3d nearest 4x32^3": lambda k: k.resample3d(vol, coords, 0, 0.0),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    names = available_backends()
    if "c" not in names:
        print("compiled backend not built; only the numpy fallback is available")
    backends = {n: get_backend(n) for n in names}
    print(f"{'kernel':<26} " + " ".join(f"{n + ' [ms]':>12}" for n in names) + f" {'speedup':>8}")
    for label, fn in cases(np.random.default_rng(0)).items():
        results = {n: best_of(lambda: fn(k), args.repeat) for n, k in backends.items()}
        outs = [r[1] for r in results.values()]
        same = all(np.array_equal(outs[0], o) for o in outs[1:])
        row = " ".join(f"{1e3 * results[n][0]:>12.2f}" for n in names)
        speed = results["python"][0] / results["c"][0] if "c" in results else float("nan")
        print(f"{label:<26} {row} {speed:>7.1f}x" + ("" if same else "  OUTPUTS DIFFER"))


if __name__ == "__main__":
    main()
