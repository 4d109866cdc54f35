"""Command-line entry point: ``pmrl train | gradcheck | suite``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from ..errors import PmrlError
from .config import load_config

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAILED = 2


class _Parser(argparse.ArgumentParser):
    # argparse uses status 2 for usage errors; here 2 means a failed check.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pmrl", description="Toy-scale multimodal alignment experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override both the model and the data seed")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=100, help="non-degenerate cases per suite")

    p = sub.add_parser("suite", help="run a multi-arm comparison")
    p.add_argument("name", help="collapse-demo, ablate or robustness")
    p.add_argument("--config", required=True, help="JSON base configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="first seed (defaults to the config seed)")
    p.add_argument("--seeds", type=int, help="number of seeds (defaults to the suite's own)")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    return parser


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.no_figures:
        cfg = replace(cfg, figures=False)
    return cfg


def _train(args) -> int:
    from .train import train

    result = train(_load(args), args.out)
    align = result.summary["train_alignment"]
    print(
        f"{result.config.objective} seed={result.config.seed} steps={result.config.steps} "
        f"sigma1_ratio={align['sigma1_ratio']:.4f} mean_cosine={align['mean_pairwise_cosine']:.4f}"
    )
    print(f"outputs written to {args.out}")
    return EXIT_OK


def _gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    reports = run_gradcheck(seed=args.seed, cases=args.cases, echo=print)
    ok = all(r.passed for r in reports)
    print("all gradient checks passed" if ok else "gradient check FAILED")
    return EXIT_OK if ok else EXIT_FAILED


def _suite(args) -> int:
    from .suites import run_suite

    report = run_suite(args.name, _load(args), args.out, n_seeds=args.seeds)
    for check in report["checks"]:
        status = "PASS" if check["holds"] else "FAIL"
        print(f"{status} {check['name']} ({check['rule']} over seeds: {check['per_seed']})")
    print(f"comparison written to {args.out}/comparison.json")
    return EXIT_OK if report["passed"] else EXIT_FAILED


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {"train": _train, "gradcheck": _gradcheck, "suite": _suite}
    try:
        return handlers[args.command](args)
    except PmrlError as exc:
        print(f"pmrl: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
