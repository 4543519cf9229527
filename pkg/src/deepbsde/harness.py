"""Seeded ablation sweeps: many solver runs per setting, summarised by quartiles.

Six families are supported. Three vary the market (time to expiration,
moneyness, long-term variance), two vary the discretisation (time steps,
batch size) and one varies the optimisation budget (epochs). Every raw run is
written to disk before it is aggregated, and aggregation is a pure function
of those raw records.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .models import HestonParams
from .oracle import McEstimate, mc_price
from .solvers import METHODS, SolverConfig, SolverDivergence, solve

QUANTILE_CONVENTION = "linear interpolation between closest ranks (type 7)"

FAMILIES = {
    "TimeToExpiration": ("market", "t_mat"),
    "Moneyness": ("market", "moneyness"),
    "LongTermVariance": ("market", "theta"),
    "TimeSteps": ("solver", "n_steps"),
    "BatchSize": ("solver", "batch"),
    "Epochs": ("solver", "iters_first"),
}

# Sweep grids at full scale; the standard value sits in the middle of each.
FULL_SWEEPS = {
    "TimeToExpiration": [3 / 12, 6 / 12, 9 / 12, 12 / 12, 15 / 12, 18 / 12, 21 / 12],
    "Moneyness": [0.9, 1.0, 1.1, 1.2, 1.3],
    "LongTermVariance": [0.06, 0.08, 0.10, 0.12, 0.14],
    "TimeSteps": [3, 5, 10, 20, 40, 80],
    "BatchSize": [4, 16, 64, 256],
    "Epochs": [250, 1000, 4000, 16000, 24000],
}
FULL_FORWARD_EPOCHS = [125, 500, 2000, 8000, 12000]


def desk_market() -> HestonParams:
    """Standard market reduced to five assets."""
    return HestonParams(d=5)


def desk_solver() -> SolverConfig:
    """Standard hyperparameters with laptop-sized iteration budgets."""
    return SolverConfig(iters_forward=2000, iters_first=4000, iters_rest=1000)


# ---------------------------------------------------------------- statistics

def quartiles(samples: Sequence[float]) -> tuple[float, float, float]:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError(f"quartiles need at least 2 samples, got {x.size}")
    if not np.isfinite(x).all():
        raise ValueError("quartiles need finite samples")
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75], method="linear")
    return float(q1), float(med), float(q3)


def median_pe(median: float, mc: float) -> float:
    """Signed percentage error of ``median`` against the reference ``mc``."""
    if mc == 0:
        raise ValueError("reference price must be nonzero")
    return 100.0 * (median - mc) / mc


def iqr(q1: float, q3: float) -> float:
    if q3 < q1:
        raise ValueError(f"inverted quartiles: q1={q1} > q3={q3}")
    return q3 - q1


def sqrt_scaling_fit(metric: Sequence[float], params: Sequence[float]) -> tuple[float, float]:
    """Least-squares line of ``metric`` against ``1/sqrt(param)``; returns (slope, R^2)."""
    y = np.asarray(metric, dtype=np.float64)
    p = np.asarray(params, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 1:
        raise ValueError("metric and params must be 1-d and of equal length")
    if y.size < 3:
        raise ValueError(f"need at least 3 points, got {y.size}")
    if (p <= 0).any():
        raise ValueError("parameters must be positive")
    x = 1.0 / np.sqrt(p)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("degenerate input: constant parameters or metric")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    r2 = 1.0 - float(resid @ resid) / float(((y - y.mean()) ** 2).sum())
    return float(slope), r2


# ---------------------------------------------------------------- specs and records

@dataclass
class ExperimentSpec:
    """One sweep: a single parameter varies, everything else stays at the base setting."""

    family: str
    sweep_values: list
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    runs_per_setting: int = 10
    market: HestonParams = field(default_factory=desk_market)
    solver: SolverConfig = field(default_factory=desk_solver)
    seed_base: int = 0
    forward_values: list | None = None
    mc_reference: dict | None = None
    mc_paths: int = 100_000
    mc_steps: int = 1000
    mc_seed: int = 0
    save_curves: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {list(FAMILIES)}")
        if not self.sweep_values:
            raise ValueError("sweep_values must be nonempty")
        self.methods = [str(m).upper() for m in self.methods]
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ValueError(f"unknown methods {bad}; expected a subset of {METHODS}")
        if self.runs_per_setting < 1:
            raise ValueError("runs_per_setting must be positive")
        if self.forward_values is not None and len(self.forward_values) != len(self.sweep_values):
            raise ValueError("forward_values must pair one-to-one with sweep_values")
        kind, _ = FAMILIES[self.family]
        cast = float if kind == "market" else int
        self.sweep_values = [cast(v) for v in self.sweep_values]

    @property
    def headline(self) -> str:
        return "iqr" if self.family == "BatchSize" else "median_pe"

    def setting_market(self, k: int) -> HestonParams:
        kind, name = FAMILIES[self.family]
        if kind == "market":
            return self.market.replace(**{name: self.sweep_values[k]})
        return self.market

    def setting_solver(self, method: str, k: int, seed: int) -> SolverConfig:
        kind, name = FAMILIES[self.family]
        cfg = self.solver.replace(method=method, seed=seed)
        if kind != "solver":
            return cfg
        value = self.sweep_values[k]
        if self.family == "Epochs" and method == "DBSDE":
            if self.forward_values is not None:
                return cfg.replace(iters_forward=int(self.forward_values[k]))
            # keep the base ratio between forward and first-step budgets
            ratio = self.solver.iters_forward / self.solver.iters_first
            return cfg.replace(iters_forward=max(1, round(value * ratio)))
        return cfg.replace(**{name: value})

    def seed_for(self, method: str, k: int, run: int) -> int:
        m = METHODS.index(method)
        return self.seed_base + (m * len(self.sweep_values) + k) * self.runs_per_setting + run


@dataclass
class RunRecord:
    method: str
    setting: float
    seed: int
    price: float
    final_val_loss: float
    status: str
    message: str = ""

    FIELDS = ("method", "setting", "seed", "price", "final_val_loss", "status", "message")


@dataclass
class SummaryRow:
    method: str
    setting: float
    q1: float
    median: float
    q3: float
    median_pe: float
    iqr: float
    n_runs: int
    mc_reference: float
    n_failed: int = 0

    FIELDS = ("method", "setting", "q1", "median", "q3", "median_pe", "iqr", "n_runs",
              "mc_reference", "n_failed")


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    rows: list[SummaryRow]
    runs: list[RunRecord]
    mc: dict[float, McEstimate]
    files: list[Path] = field(default_factory=list)


# ---------------------------------------------------------------- Monte Carlo references

def params_hash(p: HestonParams, n_paths: int, n_steps: int, seed: int) -> str:
    blob = json.dumps({"market": asdict(p), "n_paths": n_paths, "n_steps": n_steps,
                       "seed": seed}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def cached_mc_price(p: HestonParams, n_paths: int, n_steps: int, seed: int,
                    cache_dir: Path | None) -> McEstimate:
    """``mc_price`` memoised on disk under the hash of every input."""
    if cache_dir is None:
        return mc_price(p, n_paths, n_steps, seed)
    path = Path(cache_dir) / f"mc_{params_hash(p, n_paths, n_steps, seed)}.json"
    if path.exists():
        return McEstimate(**json.loads(path.read_text()))
    est = mc_price(p, n_paths, n_steps, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(asdict(est)))
    return est


def default_cache_dir() -> Path:
    root = os.environ.get("DBB_OUTPUT_DIR", "out")
    return Path(root) / "mc_cache"


def reference_prices(spec: ExperimentSpec, cache_dir: Path | None) -> dict[float, McEstimate]:
    out = {}
    for k, value in enumerate(spec.sweep_values):
        if spec.mc_reference is not None and value in spec.mc_reference:
            ref = spec.mc_reference[value]
            out[float(value)] = ref if isinstance(ref, McEstimate) else McEstimate(float(ref), 0.0, 0, 0)
        else:
            out[float(value)] = cached_mc_price(spec.setting_market(k), spec.mc_paths, spec.mc_steps,
                                         spec.mc_seed, cache_dir)
    return out


# ---------------------------------------------------------------- running

def _run_one(task) -> tuple[RunRecord, list]:
    method, value, seed, market, cfg = task
    try:
        run = solve(cfg, market)
    except SolverDivergence as exc:
        curve = exc.run.loss_curve if exc.run is not None else []
        return RunRecord(method, value, seed, float("nan"), float("nan"), "diverged", str(exc)), curve
    return RunRecord(method, value, seed, run.price, run.loss_curve[-1][1], run.status), run.loss_curve


def experiment_tasks(spec: ExperimentSpec) -> list[tuple]:
    tasks = []
    for method in spec.methods:
        for k, value in enumerate(spec.sweep_values):
            market = spec.setting_market(k)
            for run in range(spec.runs_per_setting):
                seed = spec.seed_for(method, k, run)
                tasks.append((method, float(value), seed, market,
                              spec.setting_solver(method, k, seed)))
    return tasks


def aggregate(runs: Sequence[RunRecord], mc: dict[float, McEstimate],
              methods: Sequence[str], settings: Sequence[float]) -> list[SummaryRow]:
    """Summary rows from raw runs; diverged runs are counted, not used."""
    rows = []
    for method in methods:
        for value in map(float, settings):
            mine = [r for r in runs if r.method == method and r.setting == value]
            ok = [r.price for r in mine if r.status == "ok"]
            ref = mc[value].price
            n_failed = len(mine) - len(ok)
            if len(ok) >= 2:
                q1, med, q3 = quartiles(ok)
            elif len(ok) == 1:
                q1 = med = q3 = ok[0]
            else:
                q1 = med = q3 = float("nan")
            pe = median_pe(med, ref) if ok else float("nan")
            spread = iqr(q1, q3) if ok else float("nan")
            rows.append(SummaryRow(method, value, q1, med, q3, pe, spread, len(ok), ref, n_failed))
    return rows


def run_experiment(spec: ExperimentSpec, output_dir: str | Path | None = None, workers: int = 1,
                   cache_dir: str | Path | None = None,
                   progress: Callable[[RunRecord], None] | None = None) -> ExperimentResult:
    """Run every (method, setting, run) of ``spec`` and summarise per (method, setting)."""
    out = Path(output_dir) if output_dir is not None else None
    if cache_dir is None and out is not None:
        cache_dir = out / "mc_cache"
    mc = reference_prices(spec, Path(cache_dir) if cache_dir is not None else None)
    tasks = experiment_tasks(spec)
    results: list[tuple[RunRecord, list]] = []
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for res in pool.map(_run_one, tasks):
                results.append(res)
                if progress:
                    progress(res[0])
    else:
        for task in tasks:
            res = _run_one(task)
            results.append(res)
            if progress:
                progress(res[0])
    runs = [r for r, _ in results]
    files = []
    if out is not None:
        files.append(write_runs(runs, out / "runs" / f"{spec.family}.csv"))
        files.append(write_references(mc, out / "runs" / f"{spec.family}_mc.json"))
        if spec.save_curves:
            for rec, curve in results:
                path = out / "curves" / f"{rec.method}_{rec.setting!r}_{rec.seed}.csv"
                files.append(write_curve(curve, path))
    rows = aggregate(runs, mc, spec.methods, spec.sweep_values)
    if out is not None:
        files.append(emit_report(rows, out / f"{spec.family}.csv", echo=False))
    return ExperimentResult(spec, rows, runs, mc, files)


# ---------------------------------------------------------------- files

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _open_for_write(path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def write_runs(runs: Sequence[RunRecord], path: str | Path) -> Path:
    path = Path(path)
    with _open_for_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RunRecord.FIELDS)
        for r in runs:
            w.writerow([_fmt(getattr(r, f)) for f in RunRecord.FIELDS])
    return path


def read_runs(path: str | Path) -> list[RunRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [RunRecord(row["method"], float(row["setting"]), int(row["seed"]),
                          float(row["price"]), float(row["final_val_loss"]), row["status"],
                          row["message"]) for row in csv.DictReader(fh)]


def write_references(mc: dict[float, McEstimate], path: str | Path) -> Path:
    path = Path(path)
    with _open_for_write(path) as fh:
        json.dump([{"setting": k, **asdict(v)} for k, v in mc.items()], fh, indent=1)
        fh.write("\n")
    return path


def read_references(path: str | Path) -> dict[float, McEstimate]:
    items = json.loads(Path(path).read_text())
    return {float(it.pop("setting")): McEstimate(**it) for it in items}


def reaggregate(runs_csv: str | Path) -> list[SummaryRow]:
    """Summary rows rebuilt from a persisted raw-run file and its reference prices."""
    runs_csv = Path(runs_csv)
    runs = read_runs(runs_csv)
    mc = read_references(runs_csv.with_name(runs_csv.stem + "_mc.json"))
    methods = list(dict.fromkeys(r.method for r in runs))
    settings = list(dict.fromkeys(r.setting for r in runs))
    return aggregate(runs, mc, methods, settings)


def write_curve(curve, path: str | Path) -> Path:
    path = Path(path)
    with _open_for_write(path) as fh:
        fh.write("iteration,val_loss\n")
        for it, loss in curve:
            fh.write(f"{it},{loss!r}\n")
    return path


def format_table(rows: Sequence[SummaryRow]) -> str:
    header = list(SummaryRow.FIELDS)
    body = [[f"{v:.4f}" if isinstance(v, float) else str(v)
             for v in (getattr(r, f) for f in header)] for r in rows]
    widths = [max(len(h), *(len(b[k]) for b in body)) for k, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def emit_report(rows: Sequence[SummaryRow], path: str | Path, echo: bool = True) -> Path:
    """Write ``rows`` as CSV (fixed column order) and optionally print an aligned table."""
    if not rows:
        raise ValueError("no rows to report")
    path = Path(path)
    with _open_for_write(path) as fh:
        fh.write(f"# quantiles: {QUANTILE_CONVENTION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SummaryRow.FIELDS)
        for r in rows:
            w.writerow([_fmt(getattr(r, f)) for f in SummaryRow.FIELDS])
    if echo:
        print(format_table(rows))
    return path


def read_report(path: str | Path) -> list[SummaryRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        text = "".join(line for line in fh if not line.startswith("#"))
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        rows.append(SummaryRow(row["method"], float(row["setting"]), float(row["q1"]),
                               float(row["median"]), float(row["q3"]), float(row["median_pe"]),
                               float(row["iqr"]), int(row["n_runs"]), float(row["mc_reference"]),
                               int(row["n_failed"])))
    return rows


def headline_values(rows: Sequence[SummaryRow], method: str, metric: str) -> list[float]:
    return [getattr(r, metric) for r in rows if r.method == method]


__all__ = [
    "ExperimentResult", "ExperimentSpec", "FAMILIES", "FULL_FORWARD_EPOCHS", "FULL_SWEEPS",
    "QUANTILE_CONVENTION", "RunRecord", "SummaryRow", "aggregate", "cached_mc_price",
    "default_cache_dir", "desk_market", "desk_solver", "emit_report", "experiment_tasks",
    "format_table", "headline_values", "iqr", "median_pe", "params_hash", "quartiles",
    "reaggregate", "read_references", "read_report", "read_runs", "reference_prices", "run_experiment", "sqrt_scaling_fit",
    "write_curve", "write_references", "write_runs",
]
