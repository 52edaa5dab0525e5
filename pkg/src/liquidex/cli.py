"""Command line entry point: ``liquidex {solve,policy-slice,simulate,verify,convergence} --config FILE``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from importlib import resources
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .grid import build_grid
from .model import ValidationError
from .simulate import ConstantPolicy, InvalidDt, evaluate_policy, write_paths_csv
from .solver import NonFiniteValue, StabilityRefused, convergence_study, solve, write_slice_csv
from .verify import oracle_self_checks, solver_checks

log = logging.getLogger("liquidex")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_UNSTABLE = 3
EXIT_VERIFY_FAILED = 4


def resolve_config_path(name: str) -> Path:
    """A filesystem path, or the name of a shipped config such as ``paper.cfg``."""
    path = Path(name)
    if path.exists():
        return path
    shipped = resources.files("liquidex") / "configs" / name
    if shipped.is_file():
        return Path(str(shipped))
    raise FileNotFoundError(name)


def _tag(t: float) -> str:
    return f"{t:g}"


def _grid(cfg: RunConfig, spec):
    return build_grid(spec, cfg["grid.n_x"], cfg["grid.n_z"], cfg["grid.n_tau"], cfg["grid.scheme"])


def _solve(cfg: RunConfig, args, store_times=(), keep_policy=True):
    spec = cfg.problem()
    grid = _grid(cfg, spec)
    steps = {grid.n_tau} | {grid.step_for_time(t) for t in store_times}
    sol = solve(spec, grid, cfg["grid.scheme"], force=args.force, store_steps=steps, keep_policy=keep_policy,
                workers=args.workers)
    log.info(sol.report.describe())
    return spec, sol


def cmd_solve(cfg, args, out: Path) -> int:
    times = cfg["output.slices"]
    spec, sol = _solve(cfg, args, times)
    g = sol.grid
    for t in times:
        n = g.step_for_time(t)
        write_slice_csv(out / f"value_t{_tag(t)}.csv", g, n, sol.value.slice(n), "value")
        write_slice_csv(out / f"policy_t{_tag(t)}.csv", g, n, sol.policy.slice(n), "control")
    print(f"solved on {g.n_x}x{g.n_z} grid with {g.n_tau} steps; wrote {len(times) * 2} CSV files to {out}")
    return EXIT_OK


def cmd_policy_slice(cfg, args, out: Path) -> int:
    spec, sol = _solve(cfg, args)
    g = sol.grid
    s = args.s if args.s is not None else math.sqrt(spec.s_min * spec.s_max)
    j = min(max(int(round((math.log(s) - g.z_min) / g.d_z)), 0), g.n_z)
    n = g.step_for_time(args.t)
    rates = sol.policy.slice(n)
    path = out / f"policy_slice_t{_tag(args.t)}.csv"
    with open(path, "w", newline="") as fh:
        fh.write("x,s," + ",".join(f"control_regime{ell + 1}" for ell in range(spec.m)) + "\n")
        for i in range(g.n_x + 1):
            row = ",".join(format(float(rates[i, j, ell]), ".17g") for ell in range(spec.m))
            fh.write(f"{format(float(g.x(i)), '.17g')},{format(float(g.s(j)), '.17g')},{row}\n")
    print(f"policy at t={float(g.t(n)):g} (step {n}), s={float(g.s(j)):.6g}: {path}")
    return EXIT_OK


def cmd_simulate(cfg, args, out: Path) -> int:
    spec, sol = _solve(cfg, args)
    x0, s0, r0 = cfg["simulate.x0"], cfg["simulate.s0"], cfg["simulate.regime0"] - 1
    dt = sol.grid.d_tau / 4 if cfg["simulate.dt"] == "auto" else cfg["simulate.dt"]
    policy = ConstantPolicy(args.constant_rate) if args.constant_rate is not None else sol.policy
    res = evaluate_policy(policy, spec, x0, s0, r0, cfg["simulate.n_paths"], dt, cfg["simulate.seed"],
                          workers=args.workers, keep_paths=args.paths)
    summary = res.as_dict()
    summary.update(policy="optimal" if args.constant_rate is None else f"constant {args.constant_rate:g}",
                   x0=x0, s0=s0, regime0=r0 + 1, dt=dt, seed=cfg["simulate.seed"], pde_value=sol.V(0.0, x0, s0, r0))
    (out / "simulate_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if args.paths:
        write_paths_csv(out / "paths.csv", res)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_verify(cfg, args, out: Path) -> int:
    spec, sol = _solve(cfg, args, keep_policy=False)
    against_solver = solver_checks(spec, sol)
    checks = oracle_self_checks() + against_solver
    if not against_solver:
        print("note: no solver oracle applies to this configuration; running oracle self-checks only")
    lines = [c.line() for c in checks]
    (out / "verify.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK if all(c.passed for c in checks) else EXIT_VERIFY_FAILED


def cmd_convergence(cfg, args, out: Path) -> int:
    spec = cfg.problem()
    x0, s0 = cfg["simulate.x0"], cfg["simulate.s0"]
    points = [(x0, s0, ell) for ell in range(spec.m)]
    rep = convergence_study(spec, (cfg["grid.n_x"], cfg["grid.n_z"]), args.levels, points, cfg["grid.scheme"],
                            workers=args.workers)
    path = out / "convergence.csv"
    gaps = rep.gaps
    with open(path, "w", newline="") as fh:
        fh.write("level,n_x,n_z,n_tau,regime,x,s,value,gap\n")
        for k, lv in enumerate(rep.levels):
            for p, (x, s, ell) in enumerate(points):
                gap = "" if k == 0 else format(float(gaps[k - 1, p]), ".17g")
                fh.write(f"{k},{lv.n_x},{lv.n_z},{lv.n_tau},{ell + 1},{format(x, '.17g')},{format(s, '.17g')},"
                         f"{format(float(lv.values[p]), '.17g')},{gap}\n")
    print(path.read_text(), end="")
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "policy-slice": cmd_policy_slice,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "convergence": cmd_convergence,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="liquidex", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="config file, or the name of a shipped one (paper.cfg)")
    parser.add_argument("--out", help="output directory (default: output.directory from the config)")
    parser.add_argument("--force", action="store_true", help="run even if the stability check fails")
    parser.add_argument("--workers", type=int, default=None, help="worker threads (default: LIQUIDEX_WORKERS or CPU count)")
    parser.add_argument("--t", type=float, default=0.0, help="policy-slice: calendar time")
    parser.add_argument("--s", type=float, default=None, help="policy-slice: price column (default geometric midpoint)")
    parser.add_argument("--paths", action="store_true", help="simulate: also write per-path CSV")
    parser.add_argument("--constant-rate", type=float, default=None, help="simulate: evaluate a constant selling rate")
    parser.add_argument("--levels", type=int, default=3, help="convergence: refinement levels")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(resolve_config_path(args.config))
        out = Path(args.out or cfg["output.directory"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.cfg").write_text(cfg.echo())
        return COMMANDS[args.command](cfg, args, out)
    except (ConfigError, ValidationError, InvalidDt, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StabilityRefused as exc:
        print(f"refused: {exc} (use --force to override)", file=sys.stderr)
        return EXIT_UNSTABLE
    except NonFiniteValue as exc:
        print(f"error: {exc}; the march blew up, reduce n_tau or drop --force", file=sys.stderr)
        return EXIT_UNSTABLE


if __name__ == "__main__":
    sys.exit(main())
