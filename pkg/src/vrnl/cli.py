"""Command line entry point: ``vrnl {corrupt,train,bias-sweep,diagnose}``."""

import argparse
import logging
import sys

from . import experiment
from .numerics import SingularMatrixError
from .trainer import DivergenceError


def _settings(args):
    layers = []
    if args.config:
        layers.append(experiment.load_config_file(args.config))
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise experiment.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    layers.append(overrides)
    return experiment.resolve(*layers)


def build_parser():
    parser = argparse.ArgumentParser(prog="vrnl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [("corrupt", "write a noisy dataset and its transition matrix"),
                           ("train", "train one method and write its report"),
                           ("bias-sweep", "train methods with perturbed transition matrices")]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--set", metavar="KEY=VALUE", action="append",
                       help="override a config key (repeatable)")
        p.add_argument("--out", metavar="DIR", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded BLAS for bit-identical reruns")
    p = sub.add_parser("diagnose", help="recompute loss-split curves from a saved run")
    p.add_argument("--run", metavar="DIR", required=True)
    p.add_argument("--out", metavar="DIR")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "diagnose":
            experiment.cmd_diagnose(args.run, args.out)
            return 0
        cfg = _settings(args)
        if args.command == "corrupt":
            experiment.cmd_corrupt(cfg, args.out)
        elif args.command == "train":
            _, summary = experiment.cmd_train(cfg, args.out)
            print(f"best epoch {summary['best_epoch']}: val {summary['best_val_acc']:.4f} "
                  f"test {summary['best_test_acc']:.4f}")
        else:
            experiment.cmd_bias_sweep(cfg, args.out)
    except (experiment.ConfigError, ValueError, OSError, DivergenceError,
            SingularMatrixError) as exc:
        print(f"vrnl {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
