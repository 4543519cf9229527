"""Command-line entry point: simulate, mc-price, solve, experiment, report.

Configuration comes from an INI file with sections ``[market]``, ``[solver]``,
``[experiment]``, ``[oracle]`` and ``[simulate]``; ``--set section.key=value``
overrides any single key after the file is read. A ``manifest.json`` written
by an earlier run is accepted as ``--config`` too.

Exit codes: 0 success, 1 numerical divergence, 2 configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .harness import (FAMILIES, ExperimentSpec, emit_report, format_table, reaggregate,
                      run_experiment)
from .models import CONFIG_KEYS, HestonParams, params_from_config, simulate_paths
from .nn import save_arrays
from .oracle import mc_price
from .solvers import SolverConfig, SolverDivergence, config_from_mapping, config_to_mapping, solve

SUBCOMMANDS = ("simulate", "mc-price", "solve", "experiment", "report")
NEEDS_SEED = ("solve", "experiment")

EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG = 0, 1, 2

SECTION_KEYS = {
    "market": set(CONFIG_KEYS),
    "solver": set(config_to_mapping(SolverConfig())),
    "experiment": {"family", "sweep_values", "methods", "runs_per_setting", "forward_values",
                   "save_curves"},
    "oracle": {"n_paths", "n_steps"},
    "simulate": {"n_steps", "batch"},
}


class ConfigError(ValueError):
    pass


@dataclass
class Command:
    subcommand: str
    config_path: str | None = None
    overrides: list[tuple[str, str]] = field(default_factory=list)
    seed: int | None = None
    output_dir: str = "out"
    workers: int = 1


# ---------------------------------------------------------------- parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepbsde", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file or a previous manifest.json")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, required=name in NEEDS_SEED,
                       help="random seed" + (" (required)" if name in NEEDS_SEED else ""))
        p.add_argument("--output-dir", default=os.environ.get("DBB_OUTPUT_DIR", "out"),
                       help="output directory (default: $DBB_OUTPUT_DIR or ./out)")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                       help="worker processes for experiments (default: available cores)")
    return parser


def parse_args(argv: list[str] | None = None) -> Command:
    parser = build_parser()
    ns = parser.parse_args(argv)
    overrides = []
    for item in ns.overrides:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            parser.error(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        section, name = key.split(".", 1)
        if section not in SECTION_KEYS or name not in SECTION_KEYS[section]:
            parser.error(f"unknown config key {key!r}")
        overrides.append((key, value))
    if ns.workers < 1:
        parser.error("--workers must be at least 1")
    return Command(ns.subcommand, ns.config, overrides, ns.seed, ns.output_dir, ns.workers)


def load_config(cmd: Command) -> dict[str, dict[str, str]]:
    """Config sections after overrides; unknown sections or keys raise ConfigError."""
    sections: dict[str, dict[str, str]] = {name: {} for name in SECTION_KEYS}
    if cmd.config_path:
        path = Path(cmd.config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        if path.suffix == ".json":
            loaded = json.loads(path.read_text())["config"]
        else:
            cp = configparser.ConfigParser()
            cp.optionxform = str
            cp.read(path)
            loaded = {s: dict(cp[s]) for s in cp.sections()}
        for section, items in loaded.items():
            if section not in SECTION_KEYS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in items.items():
                if key not in SECTION_KEYS[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                sections[section][key] = str(value)
    for key, value in cmd.overrides:
        section, name = key.split(".", 1)
        sections[section][name] = value
    return sections


def _split_list(text: str) -> list[str]:
    return [t for t in text.replace(",", " ").split() if t]


def market_from(sections) -> HestonParams:
    return params_from_config(sections["market"])


def solver_from(sections, seed: int | None) -> SolverConfig:
    extra = {} if seed is None else {"seed": seed}
    return config_from_mapping(sections["solver"], **extra)


def experiment_from(sections, seed: int) -> ExperimentSpec:
    exp = sections["experiment"]
    if "family" not in exp:
        raise ConfigError("experiment.family is required")
    family = exp["family"]
    if family not in FAMILIES:
        raise ConfigError(f"unknown family {family!r}; expected one of {list(FAMILIES)}")
    if "sweep_values" not in exp:
        raise ConfigError("experiment.sweep_values is required")
    kw = dict(family=family, sweep_values=[float(v) for v in _split_list(exp["sweep_values"])],
              market=market_from(sections), solver=solver_from(sections, None), seed_base=seed)
    if "methods" in exp:
        kw["methods"] = _split_list(exp["methods"])
    if "runs_per_setting" in exp:
        kw["runs_per_setting"] = int(exp["runs_per_setting"])
    if "forward_values" in exp:
        kw["forward_values"] = [int(v) for v in _split_list(exp["forward_values"])]
    if "save_curves" in exp:
        kw["save_curves"] = exp["save_curves"].strip().lower() in ("1", "true", "yes", "on")
    oracle = sections["oracle"]
    kw["mc_paths"] = int(oracle.get("n_paths", 100_000))
    kw["mc_steps"] = int(oracle.get("n_steps", 1000))
    return ExperimentSpec(**kw)


# ---------------------------------------------------------------- outputs

def config_hash(sections) -> str:
    blob = json.dumps(sections, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def write_manifest(out: Path, cmd: Command, sections, wall_time: float, status: str) -> Path:
    manifest = {
        "subcommand": cmd.subcommand,
        "seed": cmd.seed,
        "config_hash": config_hash(sections),
        "config": sections,
        "resolved": _resolved(cmd, sections),
        "rerun": _rerun_line(cmd),
        "versions": {"deepbsde": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
        "status": status,
        "wall_time": wall_time,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _resolved(cmd: Command, sections) -> dict:
    """Every effective parameter, defaults included."""
    out = {"market": asdict(market_from(sections))}
    if cmd.subcommand in ("solve", "experiment"):
        out["solver"] = config_to_mapping(solver_from(sections, cmd.seed))
    return out


def _rerun_line(cmd: Command) -> str:
    parts = ["deepbsde", cmd.subcommand, "--config", "manifest.json"]
    if cmd.seed is not None:
        parts += ["--seed", str(cmd.seed)]
    return " ".join(parts)


def _cmd_simulate(cmd: Command, sections, out: Path) -> int:
    p = market_from(sections)
    sim = sections["simulate"]
    n_steps = int(sim.get("n_steps", 40))
    batch = int(sim.get("batch", 64))
    paths = simulate_paths(p, n_steps, batch, cmd.seed or 0)
    save_arrays(out / "paths.bin", {"states": paths.states, "dw": paths.dw,
                                    "dt": np.array([paths.dt])})
    terminal = paths.states[:, -1, :p.d]
    print(f"paths={batch} steps={n_steps} mean_terminal_price={float(terminal.mean())!r}")
    return EXIT_OK


def _cmd_mc_price(cmd: Command, sections, out: Path) -> int:
    p = market_from(sections)
    oracle = sections["oracle"]
    est = mc_price(p, int(oracle.get("n_paths", 100_000)), int(oracle.get("n_steps", 1000)),
                   cmd.seed or 0)
    (out / "mc_price.csv").write_text(
        "price,std_error,n_paths,n_steps\n"
        f"{est.price!r},{est.std_error!r},{est.n_paths},{est.n_steps}\n")
    print(f"price={est.price!r} stderr={est.std_error!r}")
    return EXIT_OK


def _cmd_solve(cmd: Command, sections, out: Path) -> int:
    p = market_from(sections)
    cfg = solver_from(sections, cmd.seed)
    try:
        run = solve(cfg, p)
    except SolverDivergence as exc:
        if exc.run is not None:
            (out / "solve.csv").write_text(exc.run.to_csv())
            (out / "loss_curve.csv").write_text(exc.run.loss_curve_csv())
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    (out / "solve.csv").write_text(run.to_csv())
    (out / "loss_curve.csv").write_text(run.loss_curve_csv())
    print(f"method={cfg.method} price={run.price!r}")
    return EXIT_OK


def _cmd_experiment(cmd: Command, sections, out: Path) -> int:
    spec = experiment_from(sections, cmd.seed)
    result = run_experiment(spec, out, workers=cmd.workers)
    print(format_table(result.rows))
    failed = sum(r.n_failed for r in result.rows)
    if failed:
        print(f"{failed} run(s) diverged; see {out / 'runs'}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _cmd_report(cmd: Command, sections, out: Path) -> int:
    files = sorted(p for p in (out / "runs").glob("*.csv")) if (out / "runs").is_dir() else []
    if not files:
        raise ConfigError(f"no raw runs found under {out / 'runs'}")
    for runs_csv in files:
        rows = reaggregate(runs_csv)
        print(f"== {runs_csv.stem}")
        emit_report(rows, out / f"{runs_csv.stem}.csv")
    return EXIT_OK


HANDLERS = {"simulate": _cmd_simulate, "mc-price": _cmd_mc_price, "solve": _cmd_solve,
            "experiment": _cmd_experiment, "report": _cmd_report}


def dispatch(cmd: Command) -> int:
    t0 = time.perf_counter()
    try:
        sections = load_config(cmd)
        out = Path(cmd.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        code = HANDLERS[cmd.subcommand](cmd, sections, out)
    except (ConfigError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"configuration error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if cmd.subcommand != "report":
        write_manifest(out, cmd, sections, time.perf_counter() - t0,
                       "ok" if code == EXIT_OK else "diverged")
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        cmd = parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    return dispatch(cmd)


if __name__ == "__main__":
    sys.exit(main())
