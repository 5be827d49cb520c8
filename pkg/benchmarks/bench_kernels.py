"""Compare the compiled pairwise Jensen-Shannon kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--sizes 16 144 400] [--repeat 5]

Prints one line per size and kernel with the best wall time of each backend
and the largest absolute difference between them.
"""

import argparse
import timeit

import numpy as np

from riskoracle import _kernels_py

try:
    from riskoracle import _kernels
except ImportError:
    _kernels = None


def _rows(m, d, rng):
    p = rng.random((m, d)) + 1e-3
    return p / p.sum(axis=1, keepdims=True)


def bench(m, d=14, repeat=5, seed=0):
    rng = np.random.default_rng(seed)
    p = _rows(m, d, rng)
    g = rng.normal(size=(m, m))
    g = g + g.T
    cases = {"js": lambda mod: mod.pairwise_js(p), "js_grad": lambda mod: mod.pairwise_js_grad(p, g)}
    rows = []
    for name, call in cases.items():
        t_py = min(timeit.repeat(lambda: call(_kernels_py), number=1, repeat=repeat))
        if _kernels is None:
            rows.append((name, m, t_py, float("nan"), float("nan")))
            continue
        t_c = min(timeit.repeat(lambda: call(_kernels), number=1, repeat=repeat))
        diff = float(np.max(np.abs(call(_kernels) - call(_kernels_py))))
        rows.append((name, m, t_py, t_c, diff))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[16, 144, 400])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'kernel':8s} {'m':>5s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for m in args.sizes:
        for name, size, t_py, t_c, diff in bench(m, repeat=args.repeat):
            print(f"{name:8s} {size:5d} {1e3 * t_py:10.3f} {1e3 * t_c:10.3f} {t_py / t_c:8.2f} {diff:10.2e}")


if __name__ == "__main__":
    main()
