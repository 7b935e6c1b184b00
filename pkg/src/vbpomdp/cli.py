"""Command-line interface: ``vbpomdp {solve,simulate,condense-bench,vb-check}``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.  Logs go to
standard error; data goes to files in ``--out``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import pbvi, sim
from .condense import METRICS, CondenseConfig, cluster_condense, runnalls
from .filtering import FilterConfig
from .gm import GaussianMixture, MixtureGenSpec, mixture_isd, random_mixture
from .quadrature import class_mass
from .scenarios import BUILTINS, Scenario, builtin, scenario_from_json_dict
from .softmax import SoftmaxModel
from .vb import BOUNDS, DEFAULT_MAX_ITER, DEFAULT_TOL, vb_batch

log = logging.getLogger("vbpomdp")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SOLVE_LOG_HEADER = ["round", "alphas", "meanValue", "millis"]
BENCH_HEADER = ["dimension", "M", "target", "K", "metric", "nisd", "millis", "seed"]
VB_CHECK_HEADER = ["case", "dimension", "classes", "class", "C_quadrature", "C_vb", "gap", "iterations"]


class ConfigError(Exception):
    """Invalid flags, configuration file or scenario file."""


# --------------------------------------------------------------------------
# scenario loading


def load_scenario(name_or_path: str) -> Scenario:
    """Built-in scenario by name, or a scenario JSON file."""
    if name_or_path in BUILTINS:
        return builtin(name_or_path)
    path = Path(name_or_path)
    if not path.suffix and not path.exists():
        raise ConfigError(f"unknown scenario {name_or_path!r}; built-ins are {', '.join(sorted(BUILTINS))}")
    if not path.is_file():
        raise ConfigError(f"scenario file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    try:
        return scenario_from_json_dict(data)
    except KeyError as exc:
        raise ConfigError(f"{path}: {exc.args[0]}") from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: invalid field value: {exc}") from None


# --------------------------------------------------------------------------
# argument parsing


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in _csv_list(text)]


def _default_threads() -> int:
    env = os.environ.get("VBPOMDP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"VBPOMDP_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI file; keys in [DEFAULT] or the subcommand's section")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: VBPOMDP_THREADS or CPUs)")
    p.add_argument("--verbose", "-v", action="store_true")


def _vb_flags(p: argparse.ArgumentParser):
    p.add_argument("--vb-tol", type=float, default=DEFAULT_TOL)
    p.add_argument("--vb-max-iter", type=int, default=DEFAULT_MAX_ITER)
    p.add_argument("--bound", choices=BOUNDS, default="pairwise")


def _filter_flags(p: argparse.ArgumentParser):
    p.add_argument("--belief-target", type=int, default=20)
    p.add_argument("--belief-clusters", type=int, default=4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vbpomdp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="{solve,simulate,condense-bench,vb-check}")

    parser.subcommands = sub.choices
    p = sub.add_parser("solve", help="approximate a policy with point-based value iteration")
    _common(p)
    _vb_flags(p)
    _filter_flags(p)
    p.add_argument("--scenario", required=True, help="built-in name or scenario JSON path")
    p.add_argument("--observation", choices=["softmax", "gm"], default="softmax",
                   help="plan with the softmax model or the scenario's GM likelihoods")
    p.add_argument("--rounds", type=int, default=30)
    p.add_argument("--beliefs", type=int, default=20)
    p.add_argument("--max-depth", type=int, default=10)
    p.add_argument("--alpha-target", type=int, default=60)
    p.add_argument("--alpha-clusters", type=int, default=6)
    p.add_argument("--normalize-masses", action="store_true",
                   help="rescale variational class masses to sum to one in backups")
    p.add_argument("--policy-name", default="policy.json")

    p = sub.add_parser("simulate", help="Monte-Carlo episodes for a policy and baselines")
    _common(p)
    _vb_flags(p)
    _filter_flags(p)
    p.add_argument("--scenario", required=True)
    p.add_argument("--policy", help="policy JSON written by solve")
    p.add_argument("--policy-kind", choices=["vb", "gmLikelihood"], default="vb")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--baselines", type=_csv_list, default=[], help="comma list of greedy,perfect")
    p.add_argument("--trajectories", action="store_true", help="also write per-step trajectories")

    p = sub.add_parser("condense-bench", help="hybrid condensation versus Runnalls on random mixtures")
    _common(p)
    p.add_argument("--dimensions", type=_int_list, default=[1, 2, 4])
    p.add_argument("--components", type=int, default=400)
    p.add_argument("--target", type=int, default=20)
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--metrics", type=_csv_list, default=list(METRICS))
    p.add_argument("--repeats", type=int, default=10)

    p = sub.add_parser("vb-check", help="compare variational masses with quadrature")
    _common(p)
    _vb_flags(p)
    p.add_argument("--cases", type=int, default=200)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse twice: config-file values become defaults, explicit flags win."""
    # the first pass only locates the subcommand and config file, so a
    # required flag may still come from the file
    required = [a for s in parser.subcommands.values() for a in s._actions if a.required]
    for a in required:
        a.required = False
    try:
        args = parser.parse_args(argv)
    finally:
        for a in required:
            a.required = True
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise ConfigError("a subcommand is required")
    if not getattr(args, "config", None):
        return parser.parse_args(argv)
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    section = cp[args.command] if cp.has_section(args.command) else cp.defaults()
    sub = parser.subcommands[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in section.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise ConfigError(f"{path}: unknown key {key!r} for {args.command}")
        action = known[dest]
        try:
            if action.nargs == 0:
                if raw.lower() not in cp.BOOLEAN_STATES:
                    raise ValueError(f"not a boolean: {raw!r}")
                value = cp.BOOLEAN_STATES[raw.lower()]
            elif action.type is not None:
                value = action.type(raw)
            else:
                value = raw
        except ValueError as exc:
            raise ConfigError(f"{path}: key {key!r}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"{path}: key {key!r} must be one of {sorted(action.choices)}")
        defaults[dest] = value
    sub.set_defaults(**defaults)
    for action in sub._actions:
        if action.dest in defaults:
            action.required = False
    return parser.parse_args(argv)


def _check(args):
    positive = {"rounds": 1, "beliefs": 1, "episodes": 0, "components": 1, "target": 1, "clusters": 1,
                "repeats": 1, "cases": 1, "alpha_target": 1, "alpha_clusters": 1, "belief_target": 1,
                "belief_clusters": 1, "max_depth": 0, "vb_max_iter": 1}
    for name, low in positive.items():
        v = getattr(args, name, None)
        if v is not None and v < low:
            raise ConfigError(f"--{name.replace('_', '-')} must be at least {low}")
    if getattr(args, "vb_tol", 1.0) <= 0:
        raise ConfigError("--vb-tol must be positive")
    if args.threads is None:
        args.threads = _default_threads()
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    for m in getattr(args, "metrics", []) or []:
        if m not in METRICS:
            raise ConfigError(f"unknown metric {m!r}; choose from {', '.join(METRICS)}")
    for b in getattr(args, "baselines", []) or []:
        if b not in ("greedy", "perfect"):
            raise ConfigError(f"unknown baseline {b!r}; choose greedy or perfect")
    for dim in getattr(args, "dimensions", []) or []:
        if dim < 1:
            raise ConfigError("dimensions must be positive")
    try:
        if getattr(args, "alpha_target", None) is not None:
            CondenseConfig(args.alpha_target, args.alpha_clusters)
        if getattr(args, "belief_target", None) is not None:
            CondenseConfig(args.belief_target, args.belief_clusters)
        if getattr(args, "target", None) is not None:
            CondenseConfig(args.target, args.clusters)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory is not writable: {out}")


def _filter_config(args) -> FilterConfig:
    return FilterConfig(condense=CondenseConfig(args.belief_target, args.belief_clusters, seed=args.seed),
                        vb_tol=args.vb_tol, vb_max_iter=args.vb_max_iter, vb_bound=args.bound)


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


# --------------------------------------------------------------------------
# commands


def cmd_solve(args) -> None:
    scenario = load_scenario(args.scenario)
    model = scenario.model
    if args.observation == "gm":
        if scenario.gm_model is None:
            raise ConfigError(f"scenario {scenario.name!r} has no GM-likelihood model")
        model = scenario.gm_model
    fcfg = _filter_config(args)
    scfg = pbvi.SolverConfig(
        alpha_condense=CondenseConfig(args.alpha_target, args.alpha_clusters, seed=args.seed,
                                      max_cluster_size=150),
        vb_tol=args.vb_tol, vb_max_iter=args.vb_max_iter, vb_bound=args.bound,
        normalize_masses=args.normalize_masses, threads=args.threads)
    log.info("sampling %d beliefs (max depth %d)", args.beliefs, args.max_depth)
    beliefs = pbvi.generate_beliefs(model, scenario.initial_belief, args.beliefs, args.max_depth,
                                    seed=args.seed, filter_config=fcfg)
    out = Path(args.out)
    rows = []

    def on_round(r, policy, values, millis):
        rows.append([r, len(policy), repr(float(np.mean(values))), int(round(millis))])
        log.info("round %d: %d alphas, mean value %.6g, %d ms", r, len(policy), np.mean(values), millis)

    policy = pbvi.solve(model, beliefs, args.rounds, scfg, on_round=on_round)
    policy.save(out / args.policy_name)
    with open(out / "solve_log.csv", "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(SOLVE_LOG_HEADER)
        w.writerows(rows)
    log.info("wrote %s and %s", out / args.policy_name, out / "solve_log.csv")


def cmd_simulate(args) -> None:
    scenario = load_scenario(args.scenario)
    fcfg = _filter_config(args)
    batches = []
    if args.policy:
        path = Path(args.policy)
        if not path.is_file():
            raise ConfigError(f"policy file not found: {path}")
        try:
            policy = pbvi.PolicySet.load(path)
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ConfigError(f"{path}: invalid policy file: {exc}") from None
        model = scenario.gm_model if args.policy_kind == "gmLikelihood" else scenario.model
        if model is None or policy.dimension != model.dimension:
            raise ConfigError(f"policy {path} does not match scenario {scenario.name!r}")
        log.info("simulating %s policy for %d episodes", args.policy_kind, args.episodes)
        batches.append(sim.run_batch(scenario, args.policy_kind, policy, args.episodes, fcfg, args.seed,
                                     args.threads, record=args.trajectories))
    for kind in args.baselines:
        log.info("simulating %s baseline for %d episodes", kind, args.episodes)
        batches.append(sim.run_batch(scenario, kind, None, args.episodes, fcfg, args.seed, args.threads,
                                     record=args.trajectories))
    if not batches:
        raise ConfigError("nothing to simulate: pass --policy and/or --baselines")
    out = Path(args.out)
    sim.write_batch_csv(out / "batch.csv", batches)
    sim.write_summary_json(out / "summary.json", batches)
    if args.trajectories:
        for b in batches:
            sim.write_trajectory_csv(out / f"trajectory_{b.policy}.csv", b)
    for b in batches:
        s = b.summary
        log.info("%s: mean %s std %s capture %s%%", b.policy, s["mean"], s["std"], s["capture%"])


def cmd_condense_bench(args) -> None:
    out = Path(args.out)
    rows = []
    for dim in args.dimensions:
        for rep in range(args.repeats):
            seed = args.seed + rep
            mix = random_mixture(MixtureGenSpec(dim, args.components, seed=seed))
            t0 = time.perf_counter()
            ref = runnalls(mix, args.target)
            millis = 1e3 * (time.perf_counter() - t0)
            rows.append([dim, args.components, args.target, 1, "runnalls",
                         repr(mixture_isd(mix, ref, normalized=True)), f"{millis:.3f}", seed])
            for metric in args.metrics:
                cfg = CondenseConfig(args.target, args.clusters, metric, seed=seed)
                t0 = time.perf_counter()
                red = cluster_condense(mix, cfg)
                millis = 1e3 * (time.perf_counter() - t0)
                rows.append([dim, args.components, args.target, args.clusters, metric,
                             repr(mixture_isd(mix, red, normalized=True)), f"{millis:.3f}", seed])
            log.info("dimension %d repeat %d done", dim, rep)
    with open(out / "condense_bench.csv", "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(BENCH_HEADER)
        w.writerows(rows)


def vb_check_cases(count: int, seed: int):
    """Random (prior, softmax, class) probes in one and two dimensions."""
    rng = np.random.default_rng(seed)
    for case in range(count):
        n = 1 + case % 2
        classes = int(rng.integers(2, 5))
        model = SoftmaxModel(rng.normal(0.0, 2.0, (classes, n)), rng.normal(0.0, 1.0, classes))
        mean = rng.normal(0.0, 1.5, n)
        A = rng.normal(0.0, 1.0, (n, n))
        cov = A @ A.T + 0.2 * np.eye(n)
        yield case, model, mean, cov, int(rng.integers(classes))


def cmd_vb_check(args) -> None:
    rows = []
    worst = np.inf
    for case, model, mean, cov, c in vb_check_cases(args.cases, args.seed):
        res = vb_batch(mean[None], cov[None], model, c, args.vb_tol, args.vb_max_iter, args.bound)
        c_vb = float(np.exp(res["log_mass"][0]))
        c_q = class_mass(mean, cov, model, c, order=60 if mean.size == 1 else 40)
        worst = min(worst, c_q - c_vb)
        rows.append([case, mean.size, model.num_classes, c, repr(c_q), repr(c_vb), repr(c_q - c_vb),
                     int(res["iterations"][0])])
    with open(Path(args.out) / "vb_check.csv", "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(VB_CHECK_HEADER)
        w.writerows(rows)
    log.info("%d cases, smallest gap %.3g", len(rows), worst)


COMMANDS = {"solve": cmd_solve, "simulate": cmd_simulate, "condense-bench": cmd_condense_bench,
            "vb-check": cmd_vb_check}


def run_command(argv: list[str] | None = None) -> int:
    """Run one subcommand and return its exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(message)s")
        _check(args)
        COMMANDS[args.command](args)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    except ConfigError as exc:
        print(f"vbpomdp: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure while running is a runtime error
        print(f"vbpomdp: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run_command())
