"""Compiled vs numpy-fallback kernels: timing and bit-equality.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""

import argparse
import json
import sys
import timeit

import numpy as np

from mplssl import kernels


def cases(rng):
    x = rng.standard_normal((40_000, 39))
    c = rng.standard_normal((100, 39))
    frames = rng.standard_normal((201, 320))
    return {
        "nearest_center 40000x39 vs 100": (
            lambda: kernels.py_nearest_center(x, c),
            lambda: kernels._compiled.nearest_center(x, c),
        ),
        "overlap_add 201x320 hop 160": (
            lambda: kernels.py_overlap_add(frames, 160, 200 * 160 + 320),
            lambda: kernels._compiled.overlap_add(frames, 160, 200 * 160 + 320),
        ),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(np.array_equal(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if kernels._compiled is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return 1
    rows = []
    for name, (py, cy) in cases(np.random.default_rng(0)).items():
        t_py = min(timeit.repeat(py, number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(cy, number=1, repeat=args.repeat))
        rows.append({"kernel": name, "python_s": t_py, "cython_s": t_cy,
                     "speedup": t_py / t_cy, "bit_identical": _same(py(), cy())})
    width = max(len(r["kernel"]) for r in rows)
    print(f"{'kernel':<{width}}  {'python ms':>10}  {'cython ms':>10}  {'speedup':>8}  identical")
    for r in rows:
        print(f"{r['kernel']:<{width}}  {1e3 * r['python_s']:>10.2f}  {1e3 * r['cython_s']:>10.2f}"
              f"  {r['speedup']:>7.1f}x  {r['bit_identical']}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
