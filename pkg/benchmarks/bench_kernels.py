"""Time the compiled kernel backend against the NumPy fallback.

Runs the three hot kernels (B3 smoothing, component labeling, region
accumulation) on synthetic planes and prints per-backend timings plus
the speedup. Both backends must produce identical outputs; the
benchmark asserts that while it runs.

    python3 benchmarks/bench_kernels.py --size 1024 --repeats 5
"""

import argparse
import time

import numpy as np

from cellcat import _kernels_np

try:
    from cellcat import _kernels_cy
except ImportError:
    _kernels_cy = None


def _time(fn, repeats):
    best = float("inf")
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _cases(size, seed):
    rng = np.random.default_rng(seed)
    plane = rng.normal(300.0, 150.0, size=(size, size))
    support = np.ascontiguousarray((rng.random((size, size)) < 0.35), dtype=np.uint8)
    values = np.ascontiguousarray(rng.random((size, size)))
    labels_np, n = _kernels_np.label_components(support, 8)
    labels = np.ascontiguousarray(labels_np)
    return [
        ("b3_smooth step=1", lambda mod: mod.b3_smooth(plane, 1)),
        ("b3_smooth step=4", lambda mod: mod.b3_smooth(plane, 4)),
        ("label_components 4", lambda mod: mod.label_components(support, 4)),
        ("label_components 8", lambda mod: mod.label_components(support, 8)),
        ("region_sums", lambda mod: mod.region_sums(labels, values, n)),
        ("region_counts", lambda mod: mod.region_counts(labels, n)),
        ("region_bboxes", lambda mod: mod.region_bboxes(labels, n)),
    ]


def _equal(a, b):
    if isinstance(a, tuple):
        return len(a) == len(b) and all(_equal(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=1024, help="plane edge length")
    parser.add_argument("--repeats", type=int, default=5, help="best-of-N timing")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if _kernels_cy is None:
        print("compiled backend unavailable; timing the NumPy fallback only")

    print(f"{args.size}x{args.size} plane, best of {args.repeats}")
    header = f"{'kernel':<22} {'numpy':>10} {'cython':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, call in _cases(args.size, args.seed):
        t_np, out_np = _time(lambda: call(_kernels_np), args.repeats)
        if _kernels_cy is None:
            print(f"{name:<22} {t_np * 1e3:>8.2f}ms {'-':>10} {'-':>8}")
            continue
        t_cy, out_cy = _time(lambda: call(_kernels_cy), args.repeats)
        if not _equal(out_np, out_cy):
            raise AssertionError(f"backends disagree on {name}")
        print(
            f"{name:<22} {t_np * 1e3:>8.2f}ms {t_cy * 1e3:>8.2f}ms "
            f"{t_np / t_cy:>7.1f}x"
        )


if __name__ == "__main__":
    main()
