"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--rays 4096] [--samples 64] [--repeat 20]

Prints median wall time per call for each kernel and backend, and the
largest absolute difference between the two backends' outputs.
"""

import argparse
import statistics
import time

import numpy as np

from sanerf import kernels


def timeit(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rays", type=int, default=4096)
    ap.add_argument("--samples", type=int, default=64)
    ap.add_argument("--fine", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    r, s = args.rays, args.samples
    sigma = rng.exponential(2.0, size=(r, s))
    delta = rng.uniform(0.01, 0.1, size=(r, s))
    edges = np.sort(rng.uniform(2.0, 6.0, size=(r, s + 1)), axis=1)
    weights = rng.random((r, s))
    u = np.sort(rng.random((r, args.fine)), axis=1)
    gw = rng.standard_normal((r, s))
    gt = rng.standard_normal(r)

    try:
        backends = {"cython": kernels.get_backend("cython"), "python": kernels.get_backend("python")}
    except ImportError:
        print("compiled extension not built; only the python backend is available")
        backends = {"python": kernels.get_backend("python")}

    outs = {}
    print(f"rays={r} samples={s} fine={args.fine} (median of {args.repeat})")
    for name, impl in backends.items():
        w, tf = impl.composite_forward(sigma, delta)
        t_fwd = timeit(lambda: impl.composite_forward(sigma, delta), args.repeat)
        t_bwd = timeit(lambda: impl.composite_backward(sigma, delta, w, tf, gw, gt), args.repeat)
        t_pdf = timeit(lambda: impl.sample_pdf(edges, weights, u), args.repeat)
        outs[name] = (w, impl.composite_backward(sigma, delta, w, tf, gw, gt)[0], impl.sample_pdf(edges, weights, u)[0])
        print(f"  {name:7s} composite_forward {t_fwd * 1e3:8.3f} ms  composite_backward {t_bwd * 1e3:8.3f} ms"
              f"  sample_pdf {t_pdf * 1e3:8.3f} ms")
    if len(outs) == 2:
        diffs = [float(np.max(np.abs(a - b))) for a, b in zip(outs["cython"], outs["python"])]
        print("  max |cython - python|: weights %.2e  grad_sigma %.2e  samples %.2e" % tuple(diffs))


if __name__ == "__main__":
    main()
