"""Command-line entry point: ``nfprecond train|diagnose|compare|presets``."""
import argparse
import sys
from dataclasses import replace

from . import config as config_mod
from . import experiment
from .errors import ConfigError, FormatError, NumericFailure, RefusalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_REFUSAL = 0, 2, 3, 4


def _load(path, args):
    cfg = config_mod.load(path)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out_dir", None):
        cfg = replace(cfg, out_dir=args.out_dir)
    if getattr(args, "iters", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, iterations=args.iters))
    return cfg


def cmd_train(args):
    cfg = _load(args.config, args)
    res = experiment.train(cfg, resume=args.resume)
    last = res.final
    print(f"{cfg.label}: {res.iterations} iterations, loss {last.loss:.6g}, "
          f"{last.metric_name} {last.metric_value:.6g} -> {res.out_dir}")
    return EXIT_OK


def cmd_diagnose(args):
    cfg = _load(args.config, args)
    kappa, sparsity = args.kappa, args.sparsity
    if not kappa and not sparsity:
        kappa, sparsity = cfg.diag.kappa, True
    res = experiment.diagnose(cfg, args.checkpoint, kappa=kappa, sparsity=sparsity, out_dir=args.out_dir)
    if "spectrum" in res:
        for kind, r in res["spectrum"].items():
            print(f"kappa[{kind}] = {r.kappa:.6g} (dropped {r.n_dropped} of {r.n_params})")
    if "sparsity" in res:
        print(f"hvp sparsity = {res['sparsity'].global_fraction:.6g}")
    return EXIT_OK


def cmd_compare(args):
    cfgs = [_load(p, args) for p in args.configs]
    if args.out_dir is None and len(cfgs) > 1:
        # keep member runs apart when they would share a directory
        seen = {}
        for i, c in enumerate(cfgs):
            if c.out_dir in seen:
                cfgs[i] = replace(c, out_dir=f"{c.out_dir}-{i}")
            seen[cfgs[i].out_dir] = True
    elif args.out_dir is not None:
        cfgs = [replace(c, out_dir=f"{args.out_dir}/{i}-{c.label}") for i, c in enumerate(cfgs)]
    _, _, summary = experiment.run_compare(cfgs, args.out, args.threshold)
    for row in summary:
        print(",".join(row))
    return EXIT_OK


def cmd_presets(args):
    if args.name:
        print(config_mod.dumps(config_mod.preset(args.name, args.algorithm, args.seed or 0)), end="")
    else:
        for name in config_mod.preset_names():
            print(name)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="nfprecond", description="Preconditioned training of neural fields.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", dest="out_dir")
        sp.add_argument("--iters", type=int, help="override the iteration budget")

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("config", help="config file, or preset:NAME[:ALGORITHM]")
    t.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    common(t)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("diagnose", help="spectrum / sparsity report at a checkpoint")
    d.add_argument("config")
    d.add_argument("--checkpoint")
    d.add_argument("--kappa", action="store_true")
    d.add_argument("--sparsity", action="store_true")
    common(d)
    d.set_defaults(func=cmd_diagnose)

    c = sub.add_parser("compare", help="train several configurations and join their metrics")
    c.add_argument("configs", nargs="+")
    c.add_argument("--out", required=True, help="joined CSV path; a .summary sibling is also written")
    c.add_argument("--threshold", type=float)
    common(c)
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("presets", help="list presets, or print one as a config file")
    s.add_argument("name", nargs="?")
    s.add_argument("--algorithm", default="adam")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_presets)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RefusalError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_REFUSAL
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
