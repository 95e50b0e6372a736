"""Command-line entry point: ``prefdesign <subcommand> [flags]``.

Any flag may also come from a ``--config`` file of ``key = value`` lines
(``#`` starts a comment, keys use the flag names with dashes or
underscores). Flags given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .algorithms import STRATEGIES
from .complexity import (
    canonical_instance,
    complexity_bound,
    instance_complexity,
    lower_bound,
)
from .core import PrefDesignError, SingularMatrixError
from .design import DesignProblem, alg2_objective, solve_design
from .estimator import NumericError
from .harness import (
    ConfigError,
    DataFormatError,
    ExperimentConfig,
    ReplaySource,
    SyntheticSource,
    load_replay,
    make_synthetic,
    run_canonical_separation,
    run_experiment,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def read_config_file(path) -> dict[str, str]:
    out = {}
    try:
        lines = open(path, encoding="utf-8").read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file supplying defaults for any flag")
    p.add_argument("--delta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--output", help="output prefix for CSV files")


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategies", help=f"comma-separated subset of {','.join(STRATEGIES)}")
    p.add_argument("--omega", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--ridge", type=float)
    p.add_argument("--threshold", type=float)


def _instance_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--eps", type=float, help="use canonical_instance(d, eps) instead of a synthetic draw")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prefdesign", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="multi-seed experiment on a synthetic instance")
    _common(p), _experiment_flags(p), _instance_flags(p)

    p = sub.add_parser("replay", help="multi-seed experiment on a replay CSV")
    _common(p), _experiment_flags(p)
    p.add_argument("--path")
    p.add_argument("--split", type=float)

    p = sub.add_parser("canonical", help="label-complexity separation on the canonical instance")
    _common(p)
    p.add_argument("--d", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--budget", type=int, help="label cap per run")

    for name, text in (
        ("design", "solve and print a design"),
        ("lowerbound", "information-theoretic label lower bound"),
        ("complexity", "rho*, rho0 and the upper bound"),
    ):
        p = sub.add_parser(name, help=text)
        _common(p), _instance_flags(p)
        if name == "design":
            p.add_argument("--objective", choices=("g", "margin", "elimination"))
            p.add_argument("--round-eps", type=float, help="eps for the elimination-round objective")
        if name == "complexity":
            p.add_argument("--omega", type=float)
    return parser


_DEFAULTS = {
    "delta": 0.1, "seed": 0, "omega": 1.0, "batch_size": 50, "budget": 1500, "n_seeds": 50,
    "ridge": 1e-5, "threshold": 0.1, "d": 5, "n": 50, "margin": 0.2, "split": 0.5,
    "strategies": "ours-greedy,random,uncertainty", "objective": "g", "round_eps": 1.0,
}
_COMMAND_DEFAULTS = {"canonical": {"d": 10, "eps": 0.1, "n_seeds": 20, "budget": 2_000_000}}


def resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Merge defaults < config file < flags, converting file values with
    the flag's own type."""
    flags = {k: v for k, v in vars(args).items() if v is not None}
    types = {}
    for action in _subparser(parser, args.command)._actions:
        types[action.dest] = action.type or str
    defaults = {**_DEFAULTS, **_COMMAND_DEFAULTS.get(args.command, {})}
    merged = {k: v for k, v in defaults.items() if k in types}
    if args.config:
        for key, raw in read_config_file(args.config).items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r} for {args.command}")
            try:
                merged[key] = types[key](raw)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
    merged.update(flags)
    return merged


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _instance(opts):
    if opts.get("eps") is not None:
        return canonical_instance(opts["d"], opts["eps"])
    return make_synthetic(opts["d"], opts["n"], opts["margin"], opts["seed"])


def _experiment_config(opts, source) -> ExperimentConfig:
    return ExperimentConfig(
        strategies=tuple(s.strip() for s in opts["strategies"].split(",") if s.strip()),
        delta=opts["delta"], omega=opts["omega"], batch_size=opts["batch_size"],
        budget=opts["budget"], n_seeds=opts["n_seeds"], source=source,
        ridge=opts["ridge"], threshold=opts["threshold"], output=opts.get("output"),
    )


def _print_summary(result) -> None:
    print("strategy,budget,mean_accuracy,stderr,n_seeds")
    for r in result.summary:
        print(",".join(r.as_row()))
    for f in result.failures:
        print(f"failed cell: {f}", file=sys.stderr)


def cmd_simulate(opts):
    src = SyntheticSource(opts["d"], opts["n"], opts["margin"], opts["seed"])
    _print_summary(run_experiment(_experiment_config(opts, src)))


def cmd_replay(opts):
    if not opts.get("path"):
        raise ConfigError("replay needs --path")
    load_replay(opts["path"], opts["split"], 0)  # surface format errors before any work
    _print_summary(run_experiment(_experiment_config(opts, ReplaySource(opts["path"], opts["split"]))))


def cmd_canonical(opts):
    summary = run_canonical_separation(
        opts["d"], opts["eps"], opts["n_seeds"], opts["delta"], budget_cap=opts["budget"],
    )
    print("method,median_labels,mean_labels,n_stopped")
    for method, med, mean, stopped in summary.table():
        print(f"{method},{med:.9g},{mean:.9g},{stopped}")
    print(f"ratio,{summary.ratio:.9g}")
    print(f"margin_arm_share,{float(np.nanmedian(summary.margin_share)):.9g}")
    if summary.budget_capped:
        print("warning: at least one run hit the label cap", file=sys.stderr)


def cmd_design(opts):
    arms, model = _instance(opts)
    theta = model.theta_star
    if opts["objective"] == "g":
        problem = DesignProblem.g_optimal(arms, theta)
    elif opts["objective"] == "margin":
        problem = DesignProblem(arms, theta, np.arange(arms.n), 1.0 / (arms.features @ theta) ** 2)
    else:
        problem = alg2_objective(arms, np.arange(arms.n), theta, opts["round_eps"], opts["delta"])
    design, report = solve_design(problem)
    print(json.dumps({
        "value": report.value, "lower_bound": report.lower_bound, "gap": report.duality_gap,
        "iterations": report.iterations, "weights": design.weights.tolist(),
    }, indent=2))


def cmd_lowerbound(opts):
    arms, model = _instance(opts)
    est = lower_bound(arms, model.theta_star, opts["delta"])
    print(json.dumps({
        "value": est.value, "gap": est.gap, "converged": est.converged, "design": est.design.weights.tolist(),
    }, indent=2))


def cmd_complexity(opts):
    arms, model = _instance(opts)
    ic = instance_complexity(arms, model, opts["delta"])
    bound = complexity_bound(ic, opts["omega"], model.kappa0(arms), arms.dim, opts["delta"])
    print(json.dumps({
        "rho_star": ic.rho_star, "rho_zero": ic.rho_zero, "ell_star": ic.ell_star,
        "margin": ic.margin, "log_bar": ic.log_bar, "bound_times_c": bound,
    }, indent=2))


COMMANDS = {
    "simulate": cmd_simulate, "replay": cmd_replay, "canonical": cmd_canonical,
    "design": cmd_design, "lowerbound": cmd_lowerbound, "complexity": cmd_complexity,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        opts = resolve(args, parser)
        COMMANDS[args.command](opts)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, SingularMatrixError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PrefDesignError as exc:
        # remaining library errors are invalid inputs
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
