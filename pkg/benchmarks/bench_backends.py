"""Compare the numba kernels against the pure-numpy fallback.

Runs the two hot paths of the package -- the conv2d kernels that dominate
network training, and the per-voxel MLE fitter -- under both backends and
prints best-of-N wall times.  Usage:

    python3 benchmarks/bench_backends.py [--repeats 5]

The numba pass includes a warmup call so JIT compilation is not timed.
"""

import argparse
import time

import numpy as np

import qmap.backend as backend
from qmap.mle import FitOptions, fit_map
from qmap.nn.conv_kernels import conv2d_bwd_input, conv2d_bwd_weight, conv2d_fwd
from qmap.phantom import WeightedSeries, make_sphere_phantom
from qmap.signal import NoiseSpec, Protocol, add_noise, series_from_maps, sigma_for_snr


def best_of(fn, repeats):
    fn()  # warmup (JIT compile / cache touch)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_conv(repeats):
    rng = np.random.default_rng(0)
    # encoder-stage shape of the training config: 16x32x32x32 with 3x3 kernels
    cases = [
        ("conv 16x32x32x32 k3", (16, 32, 32, 32), (32, 32, 3, 3)),
        ("conv 16x64x16x16 k3", (16, 64, 16, 16), (64, 64, 3, 3)),
    ]
    rows = []
    for name, xs, ws in cases:
        x = rng.standard_normal(xs)
        w = rng.standard_normal(ws) * 0.1
        y = conv2d_fwd(x, w, pad=1)
        dy = rng.standard_normal(y.shape)
        for tag, fn in [
            ("fwd", lambda: conv2d_fwd(x, w, pad=1)),
            ("bwd_in", lambda: conv2d_bwd_input(dy, w, x.shape, pad=1)),
            ("bwd_w", lambda: conv2d_bwd_weight(x, dy, w.shape, pad=1)),
        ]:
            out = {}
            for bk in ("numpy", "numba"):
                backend.set_backend(bk)
                out[bk] = best_of(fn, repeats)
            rows.append((f"{name} {tag}", out["numpy"], out["numba"]))
    return rows


def bench_mle(repeats):
    qm, _ = make_sphere_phantom((64, 64), seed=1)
    proto = Protocol()
    clean = series_from_maps(qm.t1_map, qm.pd_map, qm.b_map, proto)
    noisy = add_noise(clean, NoiseSpec(sigma=sigma_for_snr(qm.pd_map.max(), 100.0), seed=1))
    opts = FitOptions()
    rows = []
    for tag, images in [("mle 64x64 noiseless", clean), ("mle 64x64 snr100", noisy)]:
        series = WeightedSeries(images=images, protocol=proto)
        out = {}
        for bk in ("numpy", "numba"):
            backend.set_backend(bk)
            out[bk] = best_of(lambda: fit_map(series, opts), repeats)
        rows.append((tag, out["numpy"], out["numba"]))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5, help="timing repeats (best-of)")
    args = ap.parse_args()

    rows = bench_conv(args.repeats) + bench_mle(args.repeats)
    width = max(len(r[0]) for r in rows)
    print(f"{'case':<{width}}  {'numpy':>10}  {'numba':>10}  {'speedup':>8}")
    for name, t_np, t_nb in rows:
        print(f"{name:<{width}}  {t_np * 1e3:>8.2f}ms  {t_nb * 1e3:>8.2f}ms  {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
