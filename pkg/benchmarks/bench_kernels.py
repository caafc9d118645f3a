"""Time the compiled kernels against the NumPy fallback on the training and scanning hot paths.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from charcascade import _pykernels
from charcascade.boosting import TrainConfig, train_cascade
from charcascade.features import (
    CS, DIGIT_APERTURE, HAAR, LBP, HaarGeometry, cell_geometry_arrays, enumerate_features,
)
from charcascade.imaging import integral_table
from charcascade.synthetic import bars_vs_noise, clutter_frame

try:
    from charcascade import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases():
    rng = np.random.default_rng(0)
    patches = rng.integers(0, 256, (2000, 24, 12), dtype=np.uint8)
    ii = integral_table(patches)
    out = []
    for kind in (CS, LBP):
        xb, yb = cell_geometry_arrays(enumerate_features(DIGIT_APERTURE, kind))
        out.append((f"{kind} codes, {len(xb)} features x 2000 patches",
                    lambda k, xb=xb, yb=yb, lbp=kind == LBP: k.batch_cell_codes(ii, xb, yb, lbp)))
    g = HaarGeometry(enumerate_features(DIGIT_APERTURE, HAAR))
    out.append((f"haar responses, {len(g.nreg)} features x 2000 patches",
                lambda k: k.batch_haar(ii, g.nreg, g.x0, g.y0, g.x1, g.y1, g.int_weight)))
    codes = rng.integers(0, 512, (2000, 4000)).astype(np.uint16)
    w = rng.random(4000)
    w /= w.sum()
    labels = (rng.random(4000) < 0.2).astype(np.uint8)
    out.append(("weighted histograms, 2000 features x 4000 samples",
                lambda k: k.weighted_histograms(codes, w, labels, 512)))

    pos, neg = bars_vs_noise(0, 600, 3000, digits="8")
    cascade, _ = train_cascade(pos, neg, TrainConfig(size_step=6, max_stages=4, far_target=1e-3), "8")
    frame = clutter_frame(1, 640, 480)
    table = integral_table(frame)
    for scale in (1.0, 2.0):
        cm = cascade.compile(scale)
        ww, wh = cascade.window_size(scale)
        ys, xs = np.mgrid[0:480 - wh + 1:2, 0:640 - ww + 1:2]
        xs = np.ascontiguousarray(xs.ravel(), dtype=np.int32)
        ys = np.ascontiguousarray(ys.ravel(), dtype=np.int32)
        out.append((f"cascade scan at scale {scale:g}, {len(xs)} windows of 640x480",
                    lambda k, xs=xs, ys=ys, cm=cm: k.scan_windows(table, xs, ys, cm)))
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
        return 1
    print(f"{'case':58s} {'compiled':>10s} {'fallback':>10s} {'speedup':>8s}")
    for name, fn in cases():
        ra, rb = fn(_kernels), fn(_pykernels)
        if not isinstance(ra, tuple):
            ra, rb = (ra,), (rb,)
        if not all(np.array_equal(a, b) for a, b in zip(ra, rb)):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        tc = best_of(lambda: fn(_kernels), args.repeat)
        tp = best_of(lambda: fn(_pykernels), args.repeat)
        print(f"{name:58s} {tc * 1e3:8.1f}ms {tp * 1e3:8.1f}ms {tp / tc:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
