"""Command-line front end: ``corrupt-mfg <command> [options]``.

Exit codes: 0 success, 1 numerical failure (non-convergence, invalid
quadrature, failed reconstruction), 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .agents import AgentEnsemble, SimConfig, empirical_density, logistic_check, simulate
from .carleman import THEOREMS, DiagonalOperator, random_suite, scan_thresholds
from .config import ConfigError, LoadedConfig, load_config, parse_config
from .grid import Grid, ScalarField, SpaceTimeField, TimeGrid, read_field_csv, write_field_csv
from .model import Expression, check_pde_hypotheses
from .retro import DEFAULT_M0, RetroConfig, ground_truth, stability_experiment
from .solvers import solve_mfg

log = logging.getLogger(__name__)

EXIT_OK, EXIT_NUMERICAL, EXIT_CONFIG = 0, 1, 2
THREADS_ENV = "CORRUPT_MFG_THREADS"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    argv: list[str]
    started: str = field(default_factory=lambda: _now())
    finished: str | None = None
    version: str = __version__
    outputs: list[dict] = field(default_factory=list)

    def add_output(self, path: Path) -> None:
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        self.outputs.append({"path": Path(path).name, "sha256": digest})

    def write(self, out_dir: Path) -> Path:
        self.finished = _now()
        target = out_dir / "manifest.json"
        _atomic_write_text(target, json.dumps(self.__dict__, indent=2, sort_keys=True))
        return target


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _write_json(path: Path, payload: dict) -> Path:
    _atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, default=_json_default))
    return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


@contextmanager
def _executor():
    n = worker_count()
    if n == 1:
        yield None
    else:
        with ThreadPoolExecutor(max_workers=n) as ex:
            yield ex


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _config(path: str | None) -> LoadedConfig:
    return load_config(path) if path else parse_config({}, "<defaults>")


def _initial_density(cfg: LoadedConfig, grid: Grid) -> ScalarField:
    expr = Expression(cfg.sections.get("solve", {}).get("m0", DEFAULT_M0))
    X, Y = grid.mesh()
    m0 = np.broadcast_to(expr(X, Y), grid.shape).copy()
    m0[:, -1] = 0.0
    if np.any(m0 < 0):
        raise ConfigError("solve.m0 must be nonnegative on the unit square")
    mass = float(np.sum(grid.weights() * m0))
    if mass <= 0:
        raise ConfigError("solve.m0 must have positive mass")
    return ScalarField(grid, m0 / mass)


def _solve(cfg: LoadedConfig):
    grid = Grid.square(cfg.grid_n)
    check_pde_hypotheses(cfg.params, grid)
    m0 = _initial_density(cfg, grid)
    X, Y = grid.mesh()
    uT = ScalarField(grid, np.broadcast_to(cfg.params.psi(X, Y), grid.shape).copy())
    return solve_mfg(m0, uT, cfg.params, cfg.solver)


# ---------------------------------------------------------------------------
# commands


def cmd_solve(args, argv) -> int:
    cfg = _config(args.config)
    out = Path(args.out_dir)
    manifest = RunManifest("solve", cfg.resolved(), None, argv)
    sol = _solve(cfg)
    out.mkdir(parents=True, exist_ok=True)
    for name, f in (("u.csv", sol.u), ("m.csv", sol.m)):
        write_field_csv(out / name, f)
        manifest.add_output(out / name)
    summary = {
        "converged": sol.converged,
        "iterations": sol.iterations,
        "residual_history": sol.residual_history,
        "mass_history": sol.mass_history(),
    }
    manifest.add_output(_write_json(out / "convergence.json", summary))
    manifest.write(out)
    print(f"picard iterations: {sol.iterations}, converged: {sol.converged}, "
          f"final residual: {sol.residual_history[-1]:.3e}")
    return EXIT_OK if sol.converged else EXIT_NUMERICAL


def cmd_simulate(args, argv) -> int:
    cfg = _config(args.config)
    section = dict(cfg.sections.get("simulate", {}))
    n_agents = args.agents or section.get("n_agents", 10_000)
    seed = args.seed if args.seed is not None else section.get("seed", 0)
    control = args.control or section.get("control_mode", "feedback")
    dt_sim = args.dt or section.get("dt_sim", 1e-3)
    try:
        sim_cfg = SimConfig(int(n_agents), float(dt_sim), int(seed), control, cfg.solver.nt)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    grid = Grid.square(cfg.grid_n)
    resolved = cfg.resolved()
    resolved["simulate"] = {"n_agents": sim_cfg.n_agents, "dt_sim": sim_cfg.dt_sim, "seed": sim_cfg.seed,
                            "control_mode": control, "start": args.start, "u_field": args.u_field}
    manifest = RunManifest("simulate", resolved, sim_cfg.seed, argv)

    u = m = None
    if args.u_field:
        path = Path(args.u_field)
        if not path.is_file():
            raise ConfigError(f"u-field file not found: {path}")
        u = read_field_csv(path)
        if not isinstance(u, SpaceTimeField) or u.grid.dim != 2:
            raise ConfigError(f"{path}: expected a 2-D space-time field")
        grid = u.grid
    elif control == "feedback":
        sol = _solve(cfg)
        u, m = sol.u, sol.m
    if args.start:
        try:
            x0, y0 = (float(v) for v in args.start.split(","))
        except ValueError:
            raise ConfigError(f"--start expects 'x,y', got {args.start!r}") from None
        ens = AgentEnsemble.at_point(sim_cfg.n_agents, x0, y0, sim_cfg.seed)
    else:
        ens = AgentEnsemble.sample_density(sim_cfg.n_agents, _initial_density(cfg, grid).values, grid, sim_cfg.seed)
    res = simulate(ens, u, cfg.params, sim_cfg, m=m)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "paths.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "agent_id", "x", "y", "alive"])
        for k, t in enumerate(res.times):
            for a in range(sim_cfg.n_agents):
                w.writerow([repr(float(t)), a, repr(float(res.positions[k, a, 0])),
                            repr(float(res.positions[k, a, 1])), int(res.alive[k, a])])
    with (out / "costs.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["agent_id", "cost", "absorbed", "absorption_time"])
        e = res.ensemble
        for a in range(sim_cfg.n_agents):
            w.writerow([a, repr(float(e.accumulated_cost[a])), int(not e.alive[a]),
                        "" if e.alive[a] else repr(float(e.absorption_time[a]))])
    time = TimeGrid(cfg.params.T, len(res.times))
    write_field_csv(out / "density.csv", empirical_density(res.positions, res.alive, grid, time))
    for name in ("paths.csv", "costs.csv", "density.csv"):
        manifest.add_output(out / name)
    stats = {"mean_cost": res.mean_cost, "stderr": res.stderr, "alive_fraction": res.alive_fraction.tolist()}
    manifest.add_output(_write_json(out / "simulate.json", stats))
    manifest.write(out)
    print(f"mean cost {res.mean_cost:.6f} +/- {res.stderr:.6f}; alive at T: {res.alive_fraction[-1]:.4f}")
    return EXIT_OK


def cmd_verify_carleman(args, argv) -> int:
    cfg = _config(args.config)
    section = cfg.sections.get("carleman", {})
    a = section.get("a", 0.1)
    suite = random_suite(args.suite_size, args.seed)
    L = DiagonalOperator.constant(a)
    with _executor() as ex:
        table = scan_thresholds(suite, args.theorem, args.lambda_list, args.s_list, L=L,
                                params=cfg.params, T=cfg.params.T, executor=ex)
    report = {
        "theorem": args.theorem,
        "suite": [list(map(list, u.terms)) for u in suite],
        "table": table.to_dict(),
        "reports": [r.to_dict() for r in table.reports],
    }
    out = Path(args.out)
    _write_json(out, report)
    resolved = cfg.resolved()
    resolved["carleman"] = {"theorem": args.theorem, "suite_size": args.suite_size, "seed": args.seed,
                            "lambda_list": args.lambda_list, "s_list": args.s_list, "a": a}
    manifest = RunManifest("verify-carleman", resolved, args.seed, argv)
    manifest.add_output(out)
    manifest.write(out.parent)
    for row in table.rows:
        margins = ", ".join(f"{k}={v:.3e}" for k, v in row.items() if k.startswith("min_margin"))
        print(f"lambda={row['lambda']:g} s={row['s']:g}: {margins}")
    print(f"threshold: {table.threshold}")
    valid = all(r.valid for r in table.reports)
    if not valid:
        print("quadrature refinement check failed for at least one cell", file=sys.stderr)
    return EXIT_OK if valid else EXIT_NUMERICAL


def cmd_retro(args, argv) -> int:
    cfg = _config(args.config)
    section = dict(cfg.sections.get("retro", {}))
    alpha = args.alpha if args.alpha is not None else section.get("tikhonov_alpha", "auto")
    if alpha != "auto":
        try:
            alpha = float(alpha)
        except ValueError:
            raise ConfigError(f"--alpha must be a number or 'auto', got {alpha!r}") from None
    try:
        rcfg = RetroConfig(
            gamma=args.gamma if args.gamma is not None else section.get("gamma", 1.25),
            tikhonov_alpha=alpha,
            cg_iters=section.get("cg_iters", 400),
            outer_iters=section.get("outer_iters", 12),
            s1_hat=section.get("s1_hat", 2.0),
            T=cfg.params.T,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    deltas = args.delta_list or section.get("delta_list", [1e-1, 1e-2, 1e-3, 1e-4])
    seeds = args.seeds or section.get("seeds", [0])
    grid = Grid.square(cfg.grid_n)
    check_pde_hypotheses(cfg.params, grid)
    truth = ground_truth(cfg.params, grid, cfg.solver.nt, section.get("m0", DEFAULT_M0), cfg.solver,
                         fine_data=bool(section.get("fine_data", False)))
    with _executor() as ex:
        result = stability_experiment(cfg.params, rcfg, deltas, seeds, grid=grid, nt=cfg.solver.nt,
                                      executor=ex, truth=truth)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.resolved()
    resolved["retro"] = {**rcfg.__dict__, "delta_list": deltas, "seeds": seeds}
    manifest = RunManifest("retro", resolved, seeds[0] if seeds else None, argv)
    for (delta, seed), sol in sorted(result.solutions.items()):
        tag = f"delta_{delta:g}_seed_{seed}"
        for name, f in (("u", sol.u), ("m", sol.m)):
            path = out / f"{name}_{tag}.csv"
            write_field_csv(path, f)
            manifest.add_output(path)
    manifest.add_output(_write_json(out / "stability.json", result.to_dict()))
    manifest.write(out)
    for r in result.records:
        print(f"delta={r.delta:g} seed={r.seed}: total error {r.total:.4e}, m0 error {r.m0_error:.3e}")
    print(f"fitted exponent: {result.rho_emp}")
    ok = all(not r.failed and r.converged for r in result.records)
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_logistic(args, argv) -> int:
    res = logistic_check(dt=args.dt)
    print(f"y(1) = {res['y1']:.8f} (exact {res['y1_exact']:.8f}); max error {res['error']:.3e}; "
          f"y({res['t_long']:g}) = {res['y_long']:.8f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="corrupt-mfg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command")

    s = sub.add_parser("solve", help="solve the coupled HJB / Fokker-Planck system")
    s.add_argument("--config")
    s.add_argument("--out-dir", default="out")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("simulate", help="Monte Carlo agents")
    s.add_argument("--config")
    s.add_argument("--agents", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--control", choices=("zero", "feedback"))
    s.add_argument("--u-field", help="CSV of u from a previous solve")
    s.add_argument("--start", help="common start 'x,y' (default: sample the initial density)")
    s.add_argument("--dt", type=float)
    s.add_argument("--out-dir", default="out")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("verify-carleman", help="numerical check of the weighted estimates")
    s.add_argument("--config")
    s.add_argument("--theorem", choices=THEOREMS, required=True)
    s.add_argument("--suite-size", type=int, default=20)
    s.add_argument("--lambda-list", type=_float_list, default=[1.0, 2.0, 5.0, 10.0])
    s.add_argument("--s-list", type=_float_list, default=[2.0, 3.0, 4.0])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="report.json")
    s.set_defaults(func=cmd_verify_carleman)

    s = sub.add_parser("retro", help="reconstruction from noisy terminal data")
    s.add_argument("--config")
    s.add_argument("--delta-list", type=_float_list)
    s.add_argument("--seeds", type=_int_list)
    s.add_argument("--gamma", type=float)
    s.add_argument("--alpha", help="Tikhonov parameter or 'auto'")
    s.add_argument("--out-dir", default="out")
    s.set_defaults(func=cmd_retro)

    s = sub.add_parser("logistic-check", help="deterministic career growth vs closed form")
    s.add_argument("--dt", type=float, default=1e-4)
    s.set_defaults(func=cmd_logistic)
    return p


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: a command is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args, argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, ArithmeticError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def main() -> None:
    sys.exit(run())
