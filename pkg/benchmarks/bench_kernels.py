"""Compiled vs numpy kernel timings, plus one end-to-end training step.

    python3 benchmarks/bench_kernels.py [--size N] [--repeat R]

Each kernel is timed with both backends on the same inputs and the speedup
of the compiled one is printed. The end-to-end figure re-imports the package
with NFPRECOND_PURE_PYTHON=1 in a subprocess so that the autodiff graph
also runs on the fallback.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from nfprecond import _kernels_py as py
from nfprecond import kernels

STEP_SNIPPET = """
import time
from dataclasses import replace
from nfprecond import config, experiment, kernels
cfg = config.preset("img-{act}", "esgd", 0)
cfg = replace(cfg, train=replace(cfg.train, iterations={iters}, eval_interval=10**9), out_dir="/tmp/nfprecond-bench")
t0 = time.perf_counter()
experiment.train(cfg, write=False)
print(kernels.BACKEND, (time.perf_counter() - t0) / {iters})
"""


def kernel_cases(n, rng):
    x = rng.standard_normal(n)
    theta, g, h = rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal(n)
    d = np.abs(rng.standard_normal(n)) + 0.1

    def fresh():
        return theta.copy(), np.zeros(n), np.zeros(n)

    cases = {}
    for name, code, p1, p2 in (("sine", kernels.SINE, 30.0, 0.0), ("gaussian", kernels.GAUSSIAN, 0.05, 0.0),
                               ("wavelet", kernels.WAVELET, 10.0, 1.0), ("relu", kernels.RELU, 0.0, 0.0)):
        cases[f"activation[{name}] f,f',f''"] = lambda b, c=code, a=p1, s=p2: b.activation(c, a, s, x, 2)
    cases["moment_step"] = lambda b: b.moment_step(*fresh(), g, g * g, 1e-3, 0.9, 0.999, 0.1, 0.001, 1e-8)
    cases["ema_square"] = lambda b: b.ema_square(np.zeros(n), h, 0.999)
    cases["max_square"] = lambda b: b.max_square(np.zeros(n), h, 0.999)
    cases["diag_step"] = lambda b: b.diag_step(theta.copy(), g, d, 1e-2, 0.5, 1e-4)
    cases["count_small"] = lambda b: b.count_small(x, 1e-3)
    return cases


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=512 * 256)
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--step-iters", type=int, default=5)
    p.add_argument("--no-step", action="store_true", help="skip the end-to-end step timing")
    args = p.parse_args(argv)
    if kernels.compiled_backend is None:
        print("compiled extension not built; only the numpy backend is available")
        return 1
    cb = kernels.compiled_backend
    print(f"elements per call: {args.size}")
    print(f"{'kernel':34s} {'numpy ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in kernel_cases(args.size, np.random.default_rng(0)).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        t_c = min(timeit.repeat(lambda: fn(cb), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:34s} {t_py:10.3f} {t_c:12.3f} {t_py / t_c:8.2f}x")
    if not args.no_step:
        print("\nend-to-end ESGD step on the 64x64 image preset (seconds per step)")
        for act in ("gauss", "sine"):
            for pure in ("0", "1"):
                env = dict(os.environ, NFPRECOND_PURE_PYTHON=pure)
                out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(act=act, iters=args.step_iters)],
                                     env=env, capture_output=True, text=True, check=True).stdout.split()
                print(f"  img-{act:8s} {out[0]:10s} {float(out[1]):.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
