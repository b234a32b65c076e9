"""``safepic`` command line: run, batch, compare, verify, list-scenarios."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import verify as checks
from .config import ConfigError, bundled_scenarios, load_raw, parse_config
from .dynamics import SafetyViolation
from .sim import CONTROLLERS, episode_seeds, run_batch, run_episode, write_metrics, write_trajectory

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_CONTROLLER = 4
EXIT_VERIFY = 5

OUTPUT_ENV = "SAFEPIC_OUTPUT_DIR"
SUITES = ("manifold", "gradients", "pathvalue-oracle", "lq-sanity", "weights", "qp", "all")

log = logging.getLogger("safepic")


def _overrides(args) -> list:
    ov = list(args.set or [])
    if getattr(args, "samples", None) is not None:
        ov.append(f"sampler.n_samples={args.samples}")
    if getattr(args, "episodes", None) is not None:
        ov.append(f"n_episodes={args.episodes}")
    if getattr(args, "controller", None):
        ov.append(f"controller={args.controller}")
    return ov


def _load(args):
    return parse_config(args.scenario, _overrides(args))


def _output_dir(args) -> Path:
    out = args.output_dir or os.environ.get(OUTPUT_ENV) or "safepic-out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _seeds(cfg, args) -> list:
    if args.seed is not None:
        return [args.seed + k for k in range(cfg.n_episodes)]
    return episode_seeds(cfg.master_seed, cfg.n_episodes)


def _print_rows(header, rows, out=None):
    writer = csv.writer(out or sys.stdout)
    writer.writerow(header)
    writer.writerows(rows)


METRIC_COLUMNS = ["controller", "episode", "seed", "safe", "min_margin", "goal_error_max", "mean_pair_distance", "max_abs_bas", "cbf_infeasible_steps", "controller_failures"]


def _metric_row(controller, k, m):
    return [
        controller,
        k,
        m.seed,
        int(m.safe),
        f"{m.min_margin:.6g}",
        f"{max(m.goal_errors):.6g}",
        f"{m.mean_pair_distance:.6g}",
        f"{m.max_abs_bas:.6g}",
        m.cbf_infeasible_steps,
        m.controller_failures,
    ]


def _figures(args):
    if args.no_figures:
        return None
    from . import report

    return report


def cmd_list(args) -> int:
    for name, path in sorted(bundled_scenarios().items()):
        raw = load_raw(name)
        print(f"{name}\t{raw['graph']['n_agents']} agents\t{len(raw.get('obstacles') or [])} obstacles\tdt={raw['dt']}\t{path}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load(args)
    seed = args.seed if args.seed is not None else episode_seeds(cfg.master_seed, 1)[0]
    out = _output_dir(args)
    t0 = time.time()
    traj, m = run_episode(cfg, seed)
    stem = f"{cfg.name}_{cfg.controller}_seed{seed}"
    write_trajectory(out / f"{stem}.csv", cfg, traj)
    (out / f"{stem}_metrics.json").write_text(json.dumps(m.to_dict(), indent=2))
    report = _figures(args)
    if report:
        report.episode_figure(out / f"{stem}.png", cfg, traj)
    _print_rows(METRIC_COLUMNS, [_metric_row(cfg.controller, 0, m)])
    log.info("episode took %.1fs; outputs in %s", time.time() - t0, out)
    return EXIT_CONTROLLER if m.controller_failures else EXIT_OK


def _batch(cfg, args, out, seeds):
    rep = run_batch(cfg, workers=args.workers, seeds=seeds)
    stem = f"{cfg.name}_{cfg.controller}"
    write_metrics(out / f"{stem}_metrics.json", rep)
    if args.trajectories:
        for k, (s, traj) in enumerate(zip(rep.seeds, rep.trajectories)):
            write_trajectory(out / f"{stem}_ep{k}_seed{s}.csv", cfg, traj)
    return rep


def cmd_batch(args) -> int:
    cfg = _load(args)
    out = _output_dir(args)
    rep = _batch(cfg, args, out, _seeds(cfg, args))
    report = _figures(args)
    if report:
        report.batch_figure(out / f"{cfg.name}_{cfg.controller}.png", cfg, rep)
    _print_rows(METRIC_COLUMNS, [_metric_row(cfg.controller, k, m) for k, m in enumerate(rep.metrics)])
    print()
    _print_rows(["key", "value"], [[k, v] for k, v in rep.summary.items()])
    return EXIT_CONTROLLER if any(m.controller_failures for m in rep.metrics) else EXIT_OK


def cmd_compare(args) -> int:
    base = _load(args)
    out = _output_dir(args)
    seeds = _seeds(base, args)
    reports = {}
    for name in args.controllers:
        reports[name] = _batch(replace(base, controller=name), args, out, seeds)
    rows = [_metric_row(name, k, m) for name, rep in reports.items() for k, m in enumerate(rep.metrics)]
    _print_rows(METRIC_COLUMNS, rows)
    print()
    summary_cols = ["controller", "n_safe", "episodes", "safe_rate", "mean_goal_error", "max_goal_error", "mean_pair_distance", "min_margin"]
    table = [[name] + [rep.summary[c] for c in summary_cols[1:]] for name, rep in reports.items()]
    _print_rows(summary_cols, table)
    comparison = {"scenario": base.name, "seeds": seeds, "controllers": {n: r.to_dict() for n, r in reports.items()}}
    (out / f"{base.name}_compare.json").write_text(json.dumps(comparison, indent=2))
    with (out / f"{base.name}_compare.csv").open("w", newline="") as fh:
        _print_rows(METRIC_COLUMNS, rows, fh)
    report = _figures(args)
    if report:
        report.compare_figure(out / f"{base.name}_compare.png", base, reports)
    failed = any(m.controller_failures for r in reports.values() for m in r.metrics)
    return EXIT_CONTROLLER if failed else EXIT_OK


def run_suite(name: str, scenario: str = "scenario1", quick: bool = False) -> list:
    """Run one named suite (or all) and return its check results."""
    names = SUITES[:-1] if name == "all" else (name,)
    results = []
    for n in names:
        if n == "manifold":
            results.append(checks.manifold_check(parse_config(scenario), dt=1e-2 if quick else 1e-3))
        elif n == "gradients":
            results.append(checks.gradient_check())
        elif n == "pathvalue-oracle":
            results.append(checks.path_value_oracle(n_instances=20 if quick else 100))
        elif n == "lq-sanity":
            results.append(checks.lq_sanity(n_samples=20_000 if quick else 100_000, tol=0.3 if quick else 0.15))
        elif n == "weights":
            results += [checks.weights_check(), checks.cancellation_check(), checks.shift_invariance_check()]
        elif n == "qp":
            results.append(checks.qp_oracle_check())
    return results


def cmd_verify(args) -> int:
    results = run_suite(args.suite, args.scenario, args.quick)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safepic", description="Barrier-state path integral control for UAV teams")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_args(sp, episodes=True):
        sp.add_argument("scenario", help="bundled scenario name or path to a YAML file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path override, repeatable")
        sp.add_argument("--seed", type=int, help="episode seed (batches use seed, seed+1, ...)")
        sp.add_argument("--samples", type=int, help="rollouts per control estimate")
        if episodes:
            sp.add_argument("--episodes", type=int)
            sp.add_argument("--workers", type=int, default=1)
            sp.add_argument("--trajectories", action="store_true", help="write one CSV per episode")
        sp.add_argument("--output-dir", help=f"defaults to ${OUTPUT_ENV} or ./safepic-out")
        sp.add_argument("--no-figures", action="store_true")

    sp = sub.add_parser("run", help="one episode; writes trajectory CSV, metrics JSON and a figure")
    scenario_args(sp, episodes=False)
    sp.add_argument("--controller", choices=CONTROLLERS)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("batch", help="n_episodes with seeds derived from master_seed")
    scenario_args(sp)
    sp.add_argument("--controller", choices=CONTROLLERS)
    sp.set_defaults(func=cmd_batch)

    sp = sub.add_parser("compare", help="same seeds for several controllers, side-by-side table")
    scenario_args(sp)
    sp.add_argument("--controllers", nargs="+", choices=CONTROLLERS, default=list(CONTROLLERS))
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("verify", help="property suites with measured vs required tolerance")
    sp.add_argument("suite", choices=SUITES)
    sp.add_argument("--scenario", default="scenario1", help="scenario for the manifold suite")
    sp.add_argument("--quick", action="store_true", help="smaller sizes and looser tolerances, for smoke tests")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("list-scenarios", help="bundled scenario files")
    sp.set_defaults(func=cmd_list)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SafetyViolation) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
