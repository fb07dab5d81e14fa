"""Time the compiled kernels against the numpy fallback.

Run from the repo root after an editable install:

    python benchmarks/bench_backends.py

The compiled column needs the Cython extension; if only the fallback is
available the script says so and exits.  Both backends are checked for
agreement on every case before timing.
"""

import argparse
import time

import numpy as np

from gapro._kernels import _fallback

try:
    from gapro._kernels import _core
except ImportError:
    _core = None


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        started = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - started)
    return best


def cases(rng):
    for n in (100, 200, 400, 800):
        a = rng.uniform(0.0, 4.0, size=(n, 3))
        yield (f"squared_distances {n}x{n}",
               lambda impl, a=a: impl.squared_distances(a, a))
        yield (f"rbf_kernel_matrix {n}x{n}",
               lambda impl, a=a: impl.rbf_kernel_matrix(a, a, 0.5, 1.0))
    positions = rng.uniform(0.0, 20.0, size=(100_000, 3))
    mins = rng.uniform(0.0, 18.0, size=(50, 3))
    maxs = mins + rng.uniform(0.5, 3.0, size=(50, 3))
    yield ("box_membership 100k x 50",
           lambda impl: impl.box_membership(positions, mins, maxs))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timing repeats per case (best is kept)")
    args = parser.parse_args()

    if _core is None:
        print("compiled extension not built; only the numpy fallback is "
              "available, nothing to compare")
        return

    rng = np.random.default_rng(0)
    rows = []
    for name, run in cases(rng):
        ref = run(_fallback)
        got = run(_core)
        assert np.allclose(ref, np.asarray(got), atol=1e-12), name
        t_numpy = best_of(lambda: run(_fallback), args.repeats)
        t_core = best_of(lambda: run(_core), args.repeats)
        rows.append((name, t_numpy * 1e3, t_core * 1e3, t_numpy / t_core))

    width = max(len(r[0]) for r in rows)
    print(f"{'case':<{width}}  {'numpy ms':>9}  {'compiled ms':>11}  {'speedup':>7}")
    for name, t_numpy, t_core, speedup in rows:
        print(f"{name:<{width}}  {t_numpy:>9.3f}  {t_core:>11.3f}  {speedup:>6.2f}x")


if __name__ == "__main__":
    main()
