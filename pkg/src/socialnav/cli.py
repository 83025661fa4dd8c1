"""Command line entry point: ``run``, ``metrics``, ``sweep`` and ``field-grid``."""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import SocialNavError
from .logs import fmt, read_episode, write_episode, write_metrics
from .metrics import MetricsReport, aggregate, compute_metrics
from .scenario import ScenarioConfig, load_scenario, shipped_scenarios_dir
from .simulation import run_episode
from .social_field import PersonPose, PsParams, field_grid


def resolve_scenario(name: str) -> Path:
    """Accept a file path or the stem of a shipped scenario (e.g. ``hallway_2ped``)."""
    p = Path(name)
    if p.is_file():
        return p
    shipped = shipped_scenarios_dir() / f"{p.stem}.toml"
    if shipped.is_file():
        return shipped
    raise FileNotFoundError(f"no scenario file {name!r}")


def configure(cfg: ScenarioConfig, seed=None, latency_ms=None, ps_weight=None,
              n_nodes=None) -> ScenarioConfig:
    """Apply command line overrides to a loaded scenario."""
    kw = {}
    if seed is not None:
        kw["seed"] = int(seed)
    nodes = tuple(sorted(cfg.nodes, key=lambda n: n.id))
    if n_nodes is not None:
        if n_nodes > len(nodes):
            raise SocialNavError(f"scenario has only {len(nodes)} node(s)")
        nodes = nodes[:n_nodes]
    if latency_ms is not None:
        nodes = tuple(replace(n, latency_ms=float(latency_ms)) for n in nodes)
    kw["nodes"] = nodes
    if ps_weight is not None:
        kw["mpc"] = replace(cfg.mpc, ps_weight=float(ps_weight))
    return cfg.with_overrides(**kw)


def _print_metrics(m: MetricsReport, out=None) -> None:
    out = out or sys.stdout
    for k, v in m.as_dict().items():
        print(f"{k:>16}: {fmt(v)}", file=out)


def _solve_time_summary(log) -> str:
    ms = np.array([1e3 * c.plan.solve_time for c in log.cycles])
    q = np.percentile(ms, [5, 25, 50, 75, 95])
    return ("plan_step ms  p5 {:.2f}  p25 {:.2f}  median {:.2f}  p75 {:.2f}  p95 {:.2f}  max {:.2f}"
            .format(*q, ms.max()))


def cmd_run(args) -> int:
    cfg = configure(load_scenario(resolve_scenario(args.scenario)), args.seed, args.latency_ms,
                    args.ps_weight, args.nodes)
    log = run_episode(cfg, lidar_enabled=not args.disable_lidar)
    m = compute_metrics(log, cfg.geometry)
    out = write_episode(log, args.out, cfg.geometry, m)
    _print_metrics(m)
    print(_solve_time_summary(log))
    print(f"logs written to {out}")
    return 0


def cmd_metrics(args) -> int:
    log, geom = read_episode(args.log_dir)
    m = compute_metrics(log, geom)
    write_metrics(m, Path(args.log_dir) / "metrics.csv")
    _print_metrics(m)
    return 0


def cmd_sweep(args) -> int:
    base = load_scenario(resolve_scenario(args.scenario))
    rows = []
    for latency in args.latencies_ms:
        for w in args.ps_weights:
            reports = []
            for seed in range(args.seed0, args.seed0 + args.seeds):
                cfg = configure(base, seed, latency, w, args.nodes)
                log = run_episode(cfg, lidar_enabled=not args.disable_lidar)
                reports.append(compute_metrics(log, cfg.geometry))
            agg = aggregate(reports)
            reached = sum(r.goal_reached for r in reports)
            for key, (mean, std) in agg.items():
                rows.append((latency, w, key, mean, std, len(reports)))
            rows.append((latency, w, "goal_reached", reached / len(reports), float("nan"),
                         len(reports)))
            print(f"latency {_label(latency, ' ms')}, ps_weight {_label(w)}: clearance "
                  f"{agg['clearance'][0]:.3f} +/- {agg['clearance'][1]:.3f}, travel time "
                  f"{agg['travel_time'][0]:.2f} +/- {agg['travel_time'][1]:.2f}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("latency_ms", "ps_weight", "metric", "mean", "std", "episodes"))
        for r in rows:
            w.writerow([fmt(v) for v in r])
    print(f"aggregate written to {out}")
    return 0


def _label(v, unit: str = "") -> str:
    return "scenario default" if v is None else f"{v:g}{unit}"


def _person(text: str) -> PersonPose:
    try:
        x, y, theta = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("person must be x,y,theta") from exc
    return PersonPose(x, y, theta)


def cmd_field_grid(args) -> int:
    cfg = load_scenario(resolve_scenario(args.scenario)) if args.scenario else None
    params = cfg.ps if cfg else PsParams()
    persons = args.person or [PersonPose(0.0, 0.0, 0.0)]
    X, Y, omega = field_grid(persons, params, args.xlim, args.ylim, args.resolution)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("x", "y", "omega"))
        for x, y, v in zip(X.ravel(), Y.ravel(), omega.ravel()):
            w.writerow((fmt(x), fmt(y), fmt(v)))
    print(f"{omega.size} grid values written to {out} (max {omega.max():.4f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="socialnav", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def scenario_overrides(p):
        p.add_argument("--ps-weight", type=float, default=None)
        p.add_argument("--disable-lidar", action="store_true")
        p.add_argument("--nodes", type=int, choices=(1, 2), default=None,
                       help="use only the first N sensor nodes")

    run = sub.add_parser("run", help="simulate one episode and write CSV logs")
    run.add_argument("scenario", help="scenario file or shipped scenario name")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default="runs/latest")
    run.add_argument("--latency-ms", type=float, default=None)
    scenario_overrides(run)
    run.set_defaults(func=cmd_run)

    met = sub.add_parser("metrics", help="recompute metrics from a log directory")
    met.add_argument("log_dir")
    met.set_defaults(func=cmd_metrics)

    sw = sub.add_parser("sweep", help="aggregate metrics across seeds and latencies")
    sw.add_argument("scenario")
    sw.add_argument("--seeds", type=int, default=10)
    sw.add_argument("--seed0", type=int, default=0)
    sw.add_argument("--latencies-ms", type=float, nargs="+", default=[None])
    sw.add_argument("--ps-weights", type=float, nargs="+", default=[None])
    sw.add_argument("--out", default="runs/sweep.csv")
    sw.add_argument("--disable-lidar", action="store_true")
    sw.add_argument("--nodes", type=int, choices=(1, 2), default=None)
    sw.set_defaults(func=cmd_sweep)

    fg = sub.add_parser("field-grid", help="dump the personal-space field on a grid")
    fg.add_argument("--person", type=_person, action="append",
                    help="x,y,theta of a person (repeatable); default one at the origin")
    fg.add_argument("--scenario", default=None, help="take field parameters from a scenario")
    fg.add_argument("--xlim", type=float, nargs=2, default=(-3.0, 3.0))
    fg.add_argument("--ylim", type=float, nargs=2, default=(-3.0, 3.0))
    fg.add_argument("--resolution", type=float, default=0.05)
    fg.add_argument("--out", default="runs/field_grid.csv")
    fg.set_defaults(func=cmd_field_grid)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SocialNavError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
