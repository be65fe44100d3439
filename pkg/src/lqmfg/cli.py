"""Command-line entry point: ``lqmfg <group> <command> [options]``.

Exit codes: 0 success, 1 validation failure, 2 numerical failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .consistency import (DetDiffViolation, PicardNotConverged, contraction_certificate, fbsee_residual,
                          picard_fixed_point, solve_decoupled)
from .model import ModelError, ModelSpec, SemigroupError, TimeGrid, validate_model
from .noise import DEFAULT_NODE_CAP, TreeTooLarge, build_noise_tree
from .riccati import (RiccatiBlowUp, check_uniqueness_assumptions, compute_lambda, solve_eta_riccati,
                      solve_pi_riccati, solve_r_riccati)
from .simulate import (SimulationError, average_state_error_experiment, epsilon_nash_experiment,
                       estimate_cost, mean_field_error, parse_deviation, simulate_n_player)

OUTPUT_ENV = "LQMFG_OUTPUT_DIR"
MANIFEST = "manifest.json"
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2, 64

NUMERICAL_ERRORS = (RiccatiBlowUp, SemigroupError, PicardNotConverged, DetDiffViolation, TreeTooLarge,
                    SimulationError, np.linalg.LinAlgError, FloatingPointError)


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    model: str
    n_steps: int = 10
    node_cap: int = DEFAULT_NODE_CAP
    tol: float = 1e-8
    max_iter: int = 100
    damping: float = 1.0
    Ns: list[int] = field(default_factory=lambda: [4, 8, 16, 32, 64, 128, 256])
    n_mc: int = 400
    seed: int | None = None
    deviation: str = "zero"
    directory: str | None = None
    emit_plots: bool = False

    def check(self) -> None:
        if not Path(self.model).is_file():
            raise ConfigError(f"model file not found: {self.model}")
        if self.n_steps < 1:
            raise ConfigError("grid.n_steps must be >= 1")
        if self.node_cap < 1:
            raise ConfigError("tree.node_cap must be >= 1")
        if not self.tol > 0:
            raise ConfigError("picard.tol must be > 0")
        if self.max_iter < 1:
            raise ConfigError("picard.max_iter must be >= 1")
        if not 0 < self.damping <= 1:
            raise ConfigError("picard.damping must lie in (0, 1]")
        if self.n_mc < 1:
            raise ConfigError("simulate.n_mc must be >= 1")
        if any(n < 1 for n in self.Ns):
            raise ConfigError("simulate.Ns entries must be >= 1")

    def output_dir(self) -> Path:
        return Path(self.directory or os.environ.get(OUTPUT_ENV) or "lqmfg-out")


_SECTIONS = {
    "grid": {"n_steps": "n_steps"},
    "tree": {"node_cap": "node_cap"},
    "picard": {"tol": "tol", "max_iter": "max_iter", "damping": "damping"},
    "simulate": {"Ns": "Ns", "n_mc": "n_mc", "seed": "seed", "deviation": "deviation"},
    "output": {"directory": "directory", "emit_plots": "emit_plots"},
}


def load_config(path: str | Path) -> RunConfig:
    """Read a YAML run config; relative paths resolve against the config's folder."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict) or "model" not in raw:
        raise ConfigError(f"{path}: config needs a top-level 'model' entry")
    unknown = set(raw) - set(_SECTIONS) - {"model"}
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    kwargs: dict[str, Any] = {"model": str((path.parent / str(raw["model"])))}
    for section, keys in _SECTIONS.items():
        block = raw.get(section) or {}
        if not isinstance(block, dict):
            raise ConfigError(f"{path}: section '{section}' must be a mapping")
        extra = set(block) - set(keys)
        if extra:
            raise ConfigError(f"{path}: unknown keys in '{section}': {sorted(extra)}")
        for key, attr in keys.items():
            if key in block:
                kwargs[attr] = block[key]
    if kwargs.get("directory") is not None:
        kwargs["directory"] = str(path.parent / str(kwargs["directory"]))
    try:
        cfg = RunConfig(**kwargs)
        cfg.n_steps, cfg.node_cap, cfg.max_iter, cfg.n_mc = (int(cfg.n_steps), int(cfg.node_cap),
                                                              int(cfg.max_iter), int(cfg.n_mc))
        cfg.tol, cfg.damping = float(cfg.tol), float(cfg.damping)
        cfg.Ns = [int(n) for n in cfg.Ns]
        cfg.seed = None if cfg.seed is None else int(cfg.seed)
        cfg.emit_plots = bool(cfg.emit_plots)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cfg


class Manifest:
    """manifest.json in the output directory; merged across commands."""

    def __init__(self, directory: Path):
        self.directory = directory
        self.path = directory / MANIFEST
        if self.path.is_file():
            with open(self.path) as fh:
                self.data = json.load(fh)
        else:
            self.data = {"files": [], "runs": []}

    def record(self, command: str, config_hash: str, seed: int | None, files: list[str],
               config: dict | None = None) -> None:
        for f in files:
            if f not in self.data["files"]:
                self.data["files"].append(f)
        self.data["files"].sort()
        self.data["config_hash"] = config_hash
        self.data["seed"] = seed
        if config is not None:
            self.data["config"] = config
        self.data["timestamp"] = datetime.now(timezone.utc).isoformat()
        self.data["runs"].append({"command": command, "config_hash": config_hash, "seed": seed,
                                  "files": sorted(files)})
        with open(self.path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_json(path: Path, data: dict) -> None:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer, np.bool_)):
            return o.item()
        raise TypeError(type(o).__name__)

    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=default)
        fh.write("\n")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, seed: bool = False) -> None:
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--model", help="model YAML (overrides config 'model')")
    p.add_argument("--output", help=f"output directory (default: config, then ${OUTPUT_ENV})")
    p.add_argument("--steps", type=int, help="number of time steps (overrides grid.n_steps)")
    p.add_argument("--node-cap", type=int, help="tree leaf cap")
    if seed:
        p.add_argument("--seed", type=int, help="random seed (required unless set in config)")
        p.add_argument("--n-mc", type=int, help="Monte Carlo replicas")
        p.add_argument("--workers", type=int, default=1, help="worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lqmfg", description="Linear-quadratic mean field games with common noise.")
    groups = parser.add_subparsers(dest="group", required=True, parser_class=_Parser)

    model = groups.add_parser("model", help="model checks").add_subparsers(dest="command", required=True,
                                                                          parser_class=_Parser)
    _common(model.add_parser("validate", help="check shapes, symmetry and PSD"))

    ric = groups.add_parser("riccati", help="Riccati solves").add_subparsers(dest="command", required=True,
                                                                            parser_class=_Parser)
    p = ric.add_parser("solve", help="solve Pi, eta or R and write a CSV")
    _common(p)
    p.add_argument("--kind", choices=["pi", "eta", "r"], default="pi")
    p.add_argument("--yosida", type=float, help="Yosida index n for eta")

    mfg = groups.add_parser("mfg", help="mean field game solves").add_subparsers(dest="command", required=True,
                                                                                parser_class=_Parser)
    p = mfg.add_parser("certify", help="contraction certificate")
    _common(p)
    p.add_argument("--strict", action="store_true", help="exit 1 when the certificate fails")
    for name, text in (("solve", "solve the consistency system"), ("residual", "residuals of a solve")):
        p = mfg.add_parser(name, help=text)
        _common(p)
        p.add_argument("--method", choices=["picard", "decoupled"], default="picard")
        p.add_argument("--tol", type=float)
        p.add_argument("--max-iter", type=int)
        p.add_argument("--damping", type=float)
    p = mfg.add_parser("simulate", help="N-player Monte Carlo with cost estimates")
    _common(p, seed=True)
    p.add_argument("--method", choices=["picard", "decoupled"], default="decoupled")
    p.add_argument("--N", type=int, help="agent count (default: largest of simulate.Ns)")
    p.add_argument("--deviation", help="agent-1 strategy: equilibrium | zero | scaled:<delta>")
    p = mfg.add_parser("rates", help="convergence-rate experiments")
    _common(p, seed=True)
    p.add_argument("--method", choices=["picard", "decoupled"], default="decoupled")
    p.add_argument("--experiment", choices=["avg-error", "eps-nash"], required=True)
    p.add_argument("--Ns", help="comma-separated agent counts")
    p.add_argument("--deviation", help="deviation(s) for eps-nash, comma-separated")

    p = groups.add_parser("report", help="collate a run directory into summary.md")
    p.add_argument("run_dir")
    p.add_argument("--plots", action="store_true", help="also write SVG plots")
    return parser


def _resolve(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.model:
        cfg = RunConfig(model=args.model)
    else:
        raise UsageError("one of --config or --model is required")
    if args.model:
        cfg.model = args.model
    overrides = {"directory": "output", "n_steps": "steps", "node_cap": "node_cap", "seed": "seed",
                 "n_mc": "n_mc", "tol": "tol", "max_iter": "max_iter", "damping": "damping",
                 "deviation": "deviation"}
    for attr, flag in overrides.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, value)
    if getattr(args, "Ns", None):
        try:
            cfg.Ns = [int(x) for x in args.Ns.split(",")]
        except ValueError:
            raise UsageError(f"--Ns must be comma-separated integers, got {args.Ns!r}") from None
    cfg.check()
    return cfg


def _config_hash(cfg: RunConfig, spec: ModelSpec) -> str:
    payload = {"config": {k: v for k, v in asdict(cfg).items() if k not in ("model", "directory")},
               "model": spec.to_dict()}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


class _Context:
    def __init__(self, cfg: RunConfig, spec: ModelSpec):
        self.cfg = cfg
        self.spec = spec
        self.grid = TimeGrid(cfg.n_steps, spec.T)
        self.out = cfg.output_dir()
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def finish(self, command: str) -> None:
        cfg_dict = {k: v for k, v in asdict(self.cfg).items() if k != "directory"}
        Manifest(self.out).record(command, _config_hash(self.cfg, self.spec), self.cfg.seed, self.files, cfg_dict)


def _load_model(cfg: RunConfig) -> ModelSpec:
    try:
        return ModelSpec.load(cfg.model)
    except (ModelError, ValueError, TypeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot load model {cfg.model}: {exc}") from None


def _solve(ctx: _Context, method: str):
    spec, grid, cfg = ctx.spec, ctx.grid, ctx.cfg
    tree = build_noise_tree(spec, grid, cfg.node_cap)
    if method == "decoupled":
        return solve_decoupled(spec, grid, tree)
    pi = solve_pi_riccati(spec, grid)
    return picard_fixed_point(spec, grid, tree, pi, tol=cfg.tol, max_iter=cfg.max_iter, damping=cfg.damping)


def _write_solution(ctx: _Context, sol) -> None:
    sol.xbar.to_csv(ctx.path("xbar_tree.csv"), sol.tree)
    from .consistency import write_tree_csv

    write_tree_csv(ctx.path("q_tree.csv"), sol.tree, sol.offset.q)
    sol.pi.to_csv(ctx.path("riccati_pi.csv"))


def cmd_validate(ctx: _Context, args) -> int:
    problems = validate_model(ctx.spec)
    write_json(ctx.path("validation.json"), {"valid": not problems, "issues": problems})
    for p in problems:
        print(f"invalid: {p}", file=sys.stderr)
    if not problems:
        print(f"model {ctx.spec.name} is valid")
    return EXIT_INVALID if problems else EXIT_OK


def cmd_riccati(ctx: _Context, args) -> int:
    spec, grid = ctx.spec, ctx.grid
    pi = solve_pi_riccati(spec, grid)
    if args.kind == "pi":
        sol = pi
    else:
        lam = compute_lambda(spec, pi)
        if args.kind == "eta":
            sol = solve_eta_riccati(spec, grid, pi, lam, yosida_n=args.yosida)
            write_json(ctx.path("assumptions.json"), check_uniqueness_assumptions(spec, lam).as_dict())
        else:
            sol = solve_r_riccati(spec, grid, lam, pi)
    sol.to_csv(ctx.path(f"riccati_{args.kind}.csv"))
    print(f"{sol.kind}: sup norm {sol.sup_norm():.6g}, value at t=0 norm {np.linalg.norm(sol[0], 2):.6g}")
    return EXIT_OK


def cmd_certify(ctx: _Context, args) -> int:
    cert = contraction_certificate(ctx.spec, ctx.grid)
    data = cert.as_dict()
    write_json(ctx.path("certificate.json"), data)
    print(f"C2*exp(T*C3) = {cert.product:.6g}; passes_contraction = {str(cert.passes_contraction).lower()}")
    if args.strict and not cert.passes_contraction:
        return EXIT_INVALID
    return EXIT_OK


def cmd_solve(ctx: _Context, args) -> int:
    sol = _solve(ctx, args.method)
    _write_solution(ctx, sol)
    info: dict[str, Any] = {"method": args.method, "n_steps": ctx.grid.n_steps, "T": ctx.spec.T}
    if args.method == "picard":
        info.update(iterations=sol.iterations, residual_history=sol.residual_history,
                    measured_ratio=sol.measured_ratio)
    write_json(ctx.path("solve.json"), info)
    print(f"{args.method} solve done; sup_t E|xbar|^2 = {sol.xbar.sq_norm():.6g}")
    return EXIT_OK


def cmd_residual(ctx: _Context, args) -> int:
    sol = _solve(ctx, args.method)
    rep = fbsee_residual(ctx.spec, ctx.grid, sol.tree, sol.pi, sol.xbar, sol.offset)
    data = rep.as_dict()
    data["method"] = args.method
    write_json(ctx.path("residual.json"), data)
    print(f"forward {rep.forward_defect:.3g}, backward {rep.backward_defect:.3g}, "
          f"martingale {rep.martingale_defect:.3g}")
    return EXIT_OK


def _deviations(cfg: RunConfig) -> list:
    try:
        return [parse_deviation(d.strip()) for d in cfg.deviation.split(",")]
    except ValueError as exc:
        raise ConfigError(f"{exc}; expected equilibrium, zero or scaled:<delta>") from None


def _require_seed(cfg: RunConfig) -> int:
    if cfg.seed is None:
        raise UsageError("--seed is required (or set simulate.seed in the config)")
    return cfg.seed


def cmd_simulate(ctx: _Context, args) -> int:
    seed = _require_seed(ctx.cfg)
    sol = _solve(ctx, args.method)
    N = args.N or max(ctx.cfg.Ns)
    devs = _deviations(ctx.cfg)
    if len(devs) != 1:
        raise ConfigError(f"mfg simulate takes one deviation, got {ctx.cfg.deviation!r}; pass --deviation")
    dev = devs[0]
    ens = simulate_n_player(ctx.spec, ctx.grid, N, ctx.cfg.n_mc, seed, sol, deviation=dev,
                            workers=args.workers)
    rows = []
    for i in range(N):
        c = estimate_cost(ctx.spec, ctx.grid, ens, i, "empirical")
        rows.append((i + 1, ens.strategy_tags[i], c.mean_cost, c.std_error, c.running_tracking,
                     c.control_energy, c.terminal_tracking))
    write_csv(ctx.path("simulate_costs.csv"),
              ["agent", "strategy", "mean_cost", "std_error", "running_tracking", "control_energy",
               "terminal_tracking"], rows)
    est, se = mean_field_error(ens)
    write_csv(ctx.path("simulate_average_state.csv"), ["N", "estimate", "std_error"], [(N, est, se)])
    print(f"N={N}, n_mc={ctx.cfg.n_mc}: agent-1 cost {rows[0][2]:.6g} +- {rows[0][3]:.2g}")
    return EXIT_OK


def cmd_rates(ctx: _Context, args) -> int:
    seed = _require_seed(ctx.cfg)
    cfg = ctx.cfg
    sol = _solve(ctx, args.method)
    if args.experiment == "avg-error":
        fit = average_state_error_experiment(ctx.spec, ctx.grid, cfg.Ns, cfg.n_mc, seed, sol,
                                             workers=args.workers)
        write_csv(ctx.path("rates_avg-error.csv"), ["N", "estimate", "std_error"],
                  zip(fit.Ns, fit.values, fit.std_errors))
    else:
        devs = _deviations(cfg)
        ex = epsilon_nash_experiment(ctx.spec, ctx.grid, cfg.Ns, cfg.n_mc, seed, sol, devs, mode="defect",
                                     workers=args.workers)
        write_csv(ctx.path("rates_eps-nash.csv"), ["N", "estimate", "std_error"],
                  [(r.N, r.gap, r.gap_se) for r in ex.per_N])
        write_csv(ctx.path("nash_defects.csv"),
                  ["N", "deviation", "J_eq", "J_eq_se", "J_dev", "J_dev_se", "defect", "pooled_se"],
                  [(r.N, name, r.J_eq, r.J_eq_se, v["J_dev"], v["J_dev_se"], v["defect"], v["pooled_se"])
                   for r in ex.per_N for name, v in r.deviations.items()])
        fit = ex.gap_fit
        if fit is None:
            print("gap is zero at some N; no rate fit written", file=sys.stderr)
            return EXIT_OK
    write_csv(ctx.path(f"rates_{args.experiment}_fit.csv"), ["slope", "intercept", "r_squared"],
              [(fit.slope, fit.intercept, fit.r_squared)])
    print(f"{args.experiment}: slope {fit.slope:.4f} (r^2 {fit.r_squared:.4f})")
    return EXIT_OK


COMMANDS = {
    ("model", "validate"): cmd_validate,
    ("riccati", "solve"): cmd_riccati,
    ("mfg", "certify"): cmd_certify,
    ("mfg", "solve"): cmd_solve,
    ("mfg", "residual"): cmd_residual,
    ("mfg", "simulate"): cmd_simulate,
    ("mfg", "rates"): cmd_rates,
}


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.group == "report":
            from .report import write_report

            return write_report(Path(args.run_dir), plots=args.plots)
        cfg = _resolve(args)
        spec = _load_model(cfg)
        key = (args.group, args.command)
        if key != ("model", "validate"):
            problems = validate_model(spec)
            if problems:
                for p in problems:
                    print(f"invalid: {p}", file=sys.stderr)
                return EXIT_INVALID
        ctx = _Context(cfg, spec)
        code = COMMANDS[key](ctx, args)
        ctx.finish(f"{args.group} {args.command}")
        return code
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def main() -> None:
    sys.exit(dispatch())
