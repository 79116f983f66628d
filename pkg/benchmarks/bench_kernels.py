"""Benchmark the compiled convolution core against the pure-Python fallback.

Run after building the extension (``pip install -e .`` or
``python setup.py build_ext --inplace``):

    python benchmarks/bench_kernels.py [--repeat 3] [--large]

Both backends are bit-identical; the point of the compiled core is that the
property suites (fusion sweeps, block-diagonal checks, centroid probes) and
the reference forward stop being the bottleneck.
"""

import argparse
import time

import numpy as np

from tinydet_kit.kernels import _pure

try:
    from tinydet_kit.kernels import _core
except ImportError:
    _core = None

# label, input (B,C,H,W), weight (CO,CIG,K,K), stride, pad, groups
CASES = [
    ("1x1 pointwise 32ch 40x40", (1, 32, 40, 40), (32, 32, 1, 1), 1, 0, 1),
    ("3x3 dense 8ch 48x48", (1, 8, 48, 48), (8, 8, 3, 3), 1, 1, 1),
    ("3x3 stride-2 stem 64x64", (1, 3, 64, 64), (24, 3, 3, 3), 2, 1, 1),
    ("3x3 depthwise 64ch 40x40", (1, 64, 40, 40), (64, 1, 3, 3), 1, 1, 64),
    ("5x5 depthwise 32ch 40x40", (1, 32, 40, 40), (32, 1, 5, 5), 1, 2, 32),
    ("grouped 1x1 g=7 49ch 40x40", (1, 49, 40, 40), (49, 7, 1, 1), 1, 0, 7),
]

LARGE_CASES = [
    ("3x3 stride-2 stem 160x160", (1, 3, 160, 160), (24, 3, 3, 3), 2, 1, 1),
    ("3x3 dense 36ch 80x80", (1, 36, 80, 80), (36, 36, 3, 3), 1, 1, 1),
]


def run_case(impl, x, w, stride, pad, groups, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = impl.conv2d_raw(x, w, None, stride, pad, groups)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--large", action="store_true",
                        help="include the slow large-map cases")
    args = parser.parse_args()

    cases = CASES + (LARGE_CASES if args.large else [])
    rng = np.random.default_rng(0)
    if _core is None:
        print("compiled core not built; timing the pure backend only")
    header = f"{'case':<30} {'pure (s)':>10} {'compiled (s)':>13} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for label, xshape, wshape, stride, pad, groups in cases:
        x = rng.standard_normal(xshape)
        w = rng.standard_normal(wshape)
        t_pure, out_pure = run_case(_pure, x, w, stride, pad, groups,
                                    args.repeat)
        if _core is None:
            print(f"{label:<30} {t_pure:>10.4f} {'-':>13} {'-':>8}")
            continue
        t_core, out_core = run_case(_core, x, w, stride, pad, groups,
                                    args.repeat)
        if not np.array_equal(out_pure, out_core):
            raise SystemExit(f"backend mismatch on {label!r}")
        print(f"{label:<30} {t_pure:>10.4f} {t_core:>13.6f} "
              f"{t_pure / t_core:>7.0f}x")


if __name__ == "__main__":
    main()
