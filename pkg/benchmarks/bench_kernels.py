"""Compare the compiled point-set kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--points 1024] [--repeat 5]

Both backends must return identical indices/distances; the script checks this
before timing.
"""

import argparse
import timeit

import numpy as np

from pointdenoise import _geomkern_py

try:
    from pointdenoise import _geomkern
except ImportError:
    _geomkern = None


def cases(n, rng):
    pts = np.ascontiguousarray(rng.normal(size=(n, 3)))
    ctr = np.ascontiguousarray(pts[:128])
    other = np.ascontiguousarray(rng.normal(size=(n, 3)))
    return {
        "fps m=64": lambda k: k.fps(pts, 64, 0),
        "fps m=128": lambda k: k.fps(pts, 128, 0),
        "knn G=128 K=32": lambda k: k.knn(pts, ctr, 32),
        "nn_sqdist": lambda k: k.nn_sqdist(pts, other),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--points", type=int, nargs="+", default=[256, 1024, 2048])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if _geomkern is None:
        print("compiled extension not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'N':>6}{'numpy ms':>12}{'cython ms':>12}{'speedup':>10}")
    for n in args.points:
        for name, fn in cases(n, rng).items():
            t_py = min(timeit.repeat(lambda: fn(_geomkern_py), number=1, repeat=args.repeat)) * 1e3
            if _geomkern is None:
                print(f"{name:<18}{n:>6}{t_py:>12.3f}{'-':>12}{'-':>10}")
                continue
            assert np.array_equal(fn(_geomkern), fn(_geomkern_py)), name
            t_c = min(timeit.repeat(lambda: fn(_geomkern), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<18}{n:>6}{t_py:>12.3f}{t_c:>12.3f}{t_py / t_c:>9.1f}x")


if __name__ == "__main__":
    main()
