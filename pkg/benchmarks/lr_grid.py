"""Learning-rate grid search over presets and optimizers.

Prints one CSV row per (preset, algorithm, eta, seed) with the final metric,
then a summary line per (preset, algorithm) naming the eta with the best
mean metric. Overrides use the config file syntax, e.g.
``--set optim.damping=1.0 --set net.init_hidden_gain=0.4``.

    python3 benchmarks/lr_grid.py img-gauss --algos adam,sgd,esgd --seeds 0,1,2
"""
import argparse
import sys
import time

import numpy as np

from nfprecond import config as C
from nfprecond import experiment as E
from nfprecond.errors import NumericFailure

HALF_DECADES = [1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0]


def make_config(preset, algo, seed, eta, overrides):
    flat = C.to_flat(C.preset(preset, algo, seed))
    flat.update(overrides)
    flat["optim.eta"] = repr(eta)
    flat["out_dir"] = "/tmp/nfprecond-grid"
    return C.from_flat(flat)


def final_metric(cfg):
    try:
        return E.train(cfg, write=False).final.metric_value
    except NumericFailure:
        return float("nan")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("presets", help="comma-separated preset names")
    p.add_argument("--algos", default="adam,sgd,esgd")
    p.add_argument("--etas", default=",".join(map(repr, HALF_DECADES)))
    p.add_argument("--seeds", default="0")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--iters", type=int)
    args = p.parse_args(argv)
    overrides = dict(s.split("=", 1) for s in args.set)
    if args.iters is not None:
        overrides["train.iterations"] = str(args.iters)
    etas = [float(x) for x in args.etas.split(",")]
    seeds = [int(x) for x in args.seeds.split(",")]
    print("preset,algorithm,eta,seed,metric,seconds")
    for preset in args.presets.split(","):
        for algo in args.algos.split(","):
            means = {}
            for eta in etas:
                vals = []
                for seed in seeds:
                    t0 = time.perf_counter()
                    m = final_metric(make_config(preset, algo, seed, eta, overrides))
                    vals.append(m)
                    print(f"{preset},{algo},{eta!r},{seed},{m:.4f},{time.perf_counter() - t0:.1f}", flush=True)
                means[eta] = float(np.mean(vals))
            lower = preset.startswith("1d")
            means = {k: (v if np.isfinite(v) else (np.inf if lower else -np.inf)) for k, v in means.items()}
            best = (min if lower else max)(means, key=means.get)
            print(f"# best {preset} {algo}: eta={best!r} mean={means[best]:.4f} "
                  f"overrides={' '.join(args.set)}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
