"""Command-line entry point: ``regmip <command> [options]``.

Exit codes: 0 success, 1 usage or input error, 2 solver failure,
3 infeasible instance.
"""

import argparse
import json
import logging
import os
import sys

from regmip import experiments as ex
from regmip import rat
from regmip.exceptions import InfeasibleError, SolverError

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_INFEASIBLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p, instance=False):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--seeds", type=int, help="number of seeds")
    p.add_argument("--I", type=int, nargs="+", dest="I", help="user counts")
    p.add_argument("--K", type=int, help="number of SBSs")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="worker processes (default: CPU count)")
    p.add_argument("--algorithm", choices=ex.ALGORITHMS)
    p.add_argument("-v", "--verbose", action="store_true")
    if instance:
        p.add_argument("instance", nargs="?", help="instance JSON file")


def build_parser():
    parser = _Parser(prog="regmip", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _common(sub.add_parser("gen", help="generate random instances"))
    _common(sub.add_parser("solve-one", help="solve one instance file"), instance=True)
    _common(sub.add_parser("oracle", help="exhaustive search"), instance=True)
    _common(sub.add_parser("cdf", help="relative error against the oracle"))
    _common(sub.add_parser("lambda-sweep", help="fixed-penalty sweep"))
    _common(sub.add_parser("convergence", help="traces for (rho, epsilon) settings"))
    return parser


def load_config(args):
    data = {}
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise UsageError("config must be a JSON object")
    data["experiment"] = args.command
    overrides = {"base_seed": args.seed, "seeds": args.seeds, "I": args.I, "K": args.K,
                 "out": args.out, "threads": args.threads, "algorithm": args.algorithm}
    data.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "instance", None):
        data["instance"] = args.instance
    if data.get("threads") is None:
        data["threads"] = os.cpu_count() or 1
    try:
        return ex.ExperimentConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from exc


def _load_instance(path):
    if not path:
        raise UsageError("an instance file is required")
    try:
        return rat.load_instance(path)
    except OSError as exc:
        raise UsageError(f"cannot read instance: {exc}") from exc
    except rat.InstanceFormatError as exc:
        raise UsageError(f"malformed instance: {exc}") from exc


def _gen(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    for I in cfg.I:
        for s in cfg.seed_list():
            inst = rat.generate_instance(cfg.channel, I, cfg.K, s)
            path = os.path.join(cfg.out, f"instance_I{I}_K{cfg.K}_seed{s}.json")
            rat.save_instance(inst, path)
            print(path)


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(args)
    if args.command == "gen":
        _gen(cfg)
        return EXIT_OK
    if args.command == "solve-one":
        result = ex.run_solve_one(cfg, _load_instance(cfg.instance))
    elif args.command == "oracle":
        inst = _load_instance(cfg.instance) if cfg.instance else None
        result = ex.run_oracle(cfg, inst)
    else:
        result = ex.RUNNERS[args.command](cfg)
    paths = ex.write_result(result, cfg.out)
    if result.report:
        print(result.report)
    for p in paths:
        print(f"wrote {p}")
    return EXIT_SOLVER if result.failed else EXIT_OK


def main(argv=None):
    try:
        code = run(argv)
    except UsageError as exc:
        print(f"regmip: error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except InfeasibleError as exc:
        print(f"regmip: infeasible: {exc}", file=sys.stderr)
        code = EXIT_INFEASIBLE
    except SolverError as exc:
        print(f"regmip: solver failure: {exc}", file=sys.stderr)
        code = EXIT_SOLVER
    except ValueError as exc:
        print(f"regmip: error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    return code


if __name__ == "__main__":
    sys.exit(main())
