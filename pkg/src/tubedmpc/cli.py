"""``tube-dmpc`` command-line interface.

Subcommands::

    benchmark  write the mass-spring-damper benchmark configuration
    synth      offline synthesis -> bundle JSON + text report
    simulate   one closed-loop run -> trajectory CSV + SVG
    compare    robust vs nominal Monte-Carlo campaign -> JSON + CSV table
    report     re-render figures from stored CSV / JSON outputs

Exit codes: 0 success, 2 synthesis infeasible, 3 infeasible initial state,
64 usage error.  ``TUBE_DMPC_THREADS`` caps the ADMM worker threads.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, conic
from .model import PUBLISHED_X0, ProblemConfig, benchmark_msd, load_config, save_config, validate
from .mpc import DMPCProblem, solve_centralized
from .sim import DISTURBANCE_MODES, export_csv, export_plot, make_disturbances, read_csv, run_campaign, run_closed_loop
from .synth import LocalGrid, SynthesisBundle, SynthesisError, synthesize

log = logging.getLogger("tubedmpc")

EXIT_OK, EXIT_SYNTH, EXIT_INFEASIBLE, EXIT_USAGE = 0, 2, 3, 64
CONTROLLERS = ("ROBUST", "NOMINAL")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2 by default; 2 is reserved for synthesis
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _out_file(out: str, default_name: str, suffix: str) -> Path:
    """``--out`` may be a file (recognised by ``suffix``) or a directory."""
    p = Path(out)
    if p.suffix == suffix:
        p.parent.mkdir(parents=True, exist_ok=True)
        return p
    p.mkdir(parents=True, exist_ok=True)
    return p / default_name


def _load(args) -> tuple:
    if not args.config:
        raise UsageError("--config is required")
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    net, cfg = load_config(path)
    if cfg.conic:
        conic.set_defaults(**{k: v for k, v in cfg.conic.items() if k in conic.SOLVE_DEFAULTS})
    return net, cfg


def _bundle_path(args) -> Path:
    if args.bundle:
        p = Path(args.bundle)
    else:
        p = Path(args.out) / "bundle.json" if Path(args.out).suffix == "" else Path(args.out).with_name("bundle.json")
    if not p.is_file():
        raise UsageError(f"bundle not found: {p} (run `tube-dmpc synth` first or pass --bundle)")
    return p


def _x0(args, net, cfg: ProblemConfig) -> np.ndarray:
    if args.x0:
        x0 = np.array([float(v) for v in args.x0.split(",")])
    elif cfg.x0 is not None:
        x0 = np.asarray(cfg.x0, dtype=float)
    else:
        raise UsageError("no initial state: set x0 in the config or pass --x0")
    if x0.size != net.n:
        raise UsageError(f"x0 has {x0.size} entries, the model has {net.n} states")
    return x0 * args.x0_scale


def _controllers(spec: str) -> list[str]:
    tags = [t.strip().upper() for t in spec.split(",") if t.strip()]
    bad = [t for t in tags if t not in CONTROLLERS]
    if bad or not tags:
        raise UsageError(f"unknown controller tag(s) {bad or spec!r}; expected robust and/or nominal")
    return tags


def _mode(m: str) -> str:
    m = m.upper()
    if m not in DISTURBANCE_MODES:
        raise UsageError(f"unknown disturbance mode {m!r}; expected one of {DISTURBANCE_MODES}")
    return m


def synth_report(net, bundle: SynthesisBundle) -> str:
    """Plain-text summary of a synthesis bundle."""
    A_K = bundle.A_K(net)
    lines = [f"mode: {bundle.mode}", f"horizon N: {bundle.N}",
             f"spectral radius of A_K: {max(abs(np.linalg.eigvals(A_K))):.6f}",
             f"RPI set volume proxy trace(P^-1): "
             + (f"{np.trace(np.linalg.inv(bundle.P)):.6g}" if not isinstance(bundle.P, list)
                else ", ".join(f"{np.trace(np.linalg.inv(P)):.6g}" for P in bundle.P))]
    for k in ("tau1", "tau2", "grid_point", "terminal_scale", "terminal"):
        if k in bundle.meta:
            lines.append(f"{k}: {bundle.meta[k]}")
    for i, P in enumerate(bundle.P_f):
        lines.append(f"agent {i + 1}: trace(P_f) = {np.trace(P):.6g}, K_f = {np.round(bundle.K_f[i], 6).tolist()}")
    lines.append("tightening margins (b(0) - b(t), min / max over rows):")
    X0, U0 = bundle.tightened_X[0], bundle.tightened_U[0]
    for t in range(1, len(bundle.tightened_X)):
        dx = X0.b - bundle.tightened_X[t].b
        line = f"  t={t}: X {dx.min():.6g} / {dx.max():.6g}"
        if t < len(bundle.tightened_U):
            du = U0.b - bundle.tightened_U[t].b
            line += f"   U {du.min():.6g} / {du.max():.6g}"
        lines.append(line)
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_benchmark(args) -> int:
    net = benchmark_msd()
    cfg = ProblemConfig(horizon=5, x0=PUBLISHED_X0.copy())
    path = _out_file(args.out, "msd.json", ".json")
    save_config(path, net, cfg)
    rep = validate(net)
    print(f"wrote {path} (validate: {'ok' if rep.ok else rep.failures()})")
    return EXIT_OK


def cmd_synth(args) -> int:
    net, cfg = _load(args)
    rep = validate(net)
    if not rep.ok:
        print(f"model validation failed: {rep.failures()}", file=sys.stderr)
        return EXIT_USAGE
    syn = dict(cfg.synthesis)
    mode = "LOCAL_K" if args.local_gains else syn.get("mode", "GLOBAL_K")
    grid = syn.get("local_grid")
    tau1 = args.tau1 if args.tau1 is not None else syn.get("tau1")
    try:
        bundle = synthesize(net, args.horizon or cfg.horizon, mode=mode, tau1=tau1,
                            local_grid=LocalGrid.from_dict(grid) if grid else None,
                            terminal=syn.get("terminal"), seed=args.seed)
    except SynthesisError as e:
        print(f"synthesis failed: {e}", file=sys.stderr)
        return EXIT_SYNTH
    path = _out_file(args.out, "bundle.json", ".json")
    bundle.save(path)
    text = synth_report(net, bundle)
    path.with_name(path.stem + "_report.txt").write_text(text)
    print(text, end="")
    print(f"wrote {path}")
    return EXIT_OK


def _problem(net, bundle, controller, margin) -> DMPCProblem:
    return DMPCProblem(net, bundle, controller, margin)


def cmd_simulate(args) -> int:
    net, cfg = _load(args)
    bundle = SynthesisBundle.load(_bundle_path(args))
    x0 = _x0(args, net, cfg)
    steps = cfg.simulation.get("steps", 60) if args.steps is None else args.steps
    if steps < 0:
        raise UsageError("--steps must be >= 0")
    mode = _mode(args.mode or cfg.simulation.get("mode", "UNIFORM_BOX"))
    (controller,) = _controllers(args.controller)
    solver = args.solver.upper()
    p = _problem(net, bundle, controller, args.margin)
    admm = {k: cfg.admm[k] for k in ("rho", "max_iter", "eps_primal", "eps_dual") if k in cfg.admm}
    first = solve_centralized(p, x0)  # feasibility does not depend on the solution method
    if not first.ok:
        print(f"initial state infeasible for the {controller.lower()} DMPC problem: "
              f"{first.status.value} ({first.message})", file=sys.stderr)
        return EXIT_INFEASIBLE
    dist = make_disturbances(net.W, mode, steps, args.seed)
    rec = run_closed_loop(net, bundle, controller, steps, dist, x0, solver, args.margin, admm, p)
    csv_path = _out_file(args.out, "trajectory.csv", ".csv")
    export_csv(rec, csv_path)
    export_plot(rec, csv_path.with_suffix(".svg"), net, bundle)
    meta = dict(rec.metadata)
    meta.update(steps=steps, feasible=rec.feasible, csv=csv_path.name, svg=csv_path.with_suffix(".svg").name)
    csv_path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    print(f"{len(rec.steps)} steps, feasible={rec.feasible}; wrote {csv_path} and {csv_path.with_suffix('.svg')}")
    return EXIT_OK


def _summary_rows(report: dict) -> list[list]:
    rows = [["controller", "infeasibility_rate", "infeasible_trials", "constraint_violation_rate", "mean_cost",
             "alpha_min", "alpha_max"]]
    for c, r in report["controllers"].items():
        rows.append([c, r["infeasibility_rate"], r["infeasible_trials"], r["constraint_violation_rate"],
                     "" if r["mean_cost"] is None else r["mean_cost"],
                     "" if r["alpha_min"] is None else min(r["alpha_min"]),
                     "" if r["alpha_max"] is None else max(r["alpha_max"])])
    return rows


def cmd_compare(args) -> int:
    controllers = _controllers(args.controllers)
    net, cfg = _load(args)
    bundle = SynthesisBundle.load(_bundle_path(args))
    x0 = _x0(args, net, cfg)
    mode = _mode(args.mode or cfg.simulation.get("mode", "UNIFORM_BOX"))
    trials = cfg.simulation.get("trials", 100) if args.trials is None else args.trials
    steps = cfg.simulation.get("steps", 60) if args.steps is None else args.steps
    if trials < 1 or steps < 0:
        raise UsageError("--trials must be >= 1 and --steps >= 0")
    admm = {k: cfg.admm[k] for k in ("rho", "max_iter", "eps_primal", "eps_dual") if k in cfg.admm}
    rep = run_campaign(net, bundle, controllers, trials, steps, args.seed, x0, mode, args.solver.upper(),
                       args.margin, admm=admm)
    path = _out_file(args.out, "compare.json", ".json")
    path.write_text(json.dumps(rep, indent=2, sort_keys=True))
    rows = _summary_rows(rep)
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    _plot_compare(rep, path.with_suffix(".svg"))
    widths = [max(len(_fmt(r[k])) for r in rows) for k in range(len(rows[0]))]
    for r in rows:
        print("  ".join(_fmt(v).ljust(w) for v, w in zip(r, widths)))
    print(f"wrote {path}, {path.with_suffix('.csv')}, {path.with_suffix('.svg')}")
    return EXIT_OK


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def _plot_compare(rep: dict, path: Path) -> None:
    from .plotting import plot_campaign

    plot_campaign(rep, path)


def cmd_report(args) -> int:
    if not args.csv and not args.compare:
        raise UsageError("report needs --csv and/or --compare")
    written = []
    if args.csv:
        net, _ = _load(args)
        bundle = SynthesisBundle.load(_bundle_path(args))
        for c in args.csv:
            rec = read_csv(c)
            if rec.n != net.n or rec.M != net.M:
                raise UsageError(f"{c} does not match the configured model")
            svg = _out_file(args.out, Path(c).with_suffix(".svg").name, ".svg")
            export_plot(rec, svg, net, bundle)
            written.append(svg)
    if args.compare:
        rep = json.loads(Path(args.compare).read_text())
        svg = _out_file(args.out, Path(args.compare).with_suffix(".svg").name, ".svg")
        _plot_compare(rep, svg)
        with open(svg.with_suffix(".csv"), "w", newline="") as fh:
            csv.writer(fh).writerows(_summary_rows(rep))
        written += [svg, svg.with_suffix(".csv")]
    print("wrote " + ", ".join(str(w) for w in written))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="tube-dmpc", description="Robust tube distributed MPC toolkit.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True, bundle=False):
        p.add_argument("--out", default="./out", help="output directory or file (default ./out)")
        p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        if config:
            p.add_argument("--config", help="model/problem configuration JSON")
        if bundle:
            p.add_argument("--bundle", help="synthesis bundle JSON (default <out>/bundle.json)")

    def run_opts(p):
        p.add_argument("--x0", help="comma-separated initial state (overrides the config)")
        p.add_argument("--x0-scale", type=float, default=1.0, help="multiply the initial state by this factor")
        p.add_argument("--steps", type=int, help="closed-loop steps (config default 60)")
        p.add_argument("--mode", help="disturbance mode: UNIFORM_BOX, VERTEX or ZERO")
        p.add_argument("--solver", choices=["central", "admm", "CENTRAL", "ADMM"], default="central")
        p.add_argument("--margin", choices=["ellipsoid", "zonotope"], default="ellipsoid",
                       help="terminal error margin representation")

    p = sub.add_parser("benchmark", help="write the benchmark configuration")
    common(p, config=False)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("synth", help="offline synthesis")
    common(p)
    p.add_argument("--local-gains", action="store_true", help="neighbourhood gains K_Ni instead of a global K")
    p.add_argument("--tau1", type=float, help="S-procedure multiplier tried first (grid fallback)")
    p.add_argument("--horizon", type=int, help="override the configured horizon N")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("simulate", help="single closed-loop run")
    common(p, bundle=True)
    run_opts(p)
    p.add_argument("--controller", default="robust", help="robust or nominal")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="robust vs nominal Monte-Carlo campaign")
    common(p, bundle=True)
    run_opts(p)
    p.add_argument("--trials", type=int, help="number of seeds (config default 100)")
    p.add_argument("--controllers", default="robust,nominal", help="comma-separated controller tags")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="re-render figures from stored outputs")
    common(p, bundle=True)
    p.add_argument("--csv", nargs="*", help="trajectory CSV file(s)")
    p.add_argument("--compare", help="campaign JSON written by `compare`")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not args.verbose:
        warnings.filterwarnings("ignore", module="cvxpy")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"tube-dmpc: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
