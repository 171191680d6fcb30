"""
Experiment runner and command-line entry point.

Subcommands:
    run <spec.json>                       sweep policies x values x seeds, write CSVs + manifest
    assign --instance FILE [--solver ...] solve one instance, print or save the assignment
    verify --instance FILE --assignment FILE
    export-mps --instance FILE -o FILE.mps

Exit codes: 0 success, 1 validation error, 2 run failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, field_validator

from . import __version__
from .assignment import Assignment, Policy, assign, build_p1, verify_assignment
from .errors import ConfigError, InstanceValidationError, MilpValidationError, OffloadError
from .milp import SolverOptions
from .model import load_instance
from .mps import export_mps
from .scenario import ScenarioConfig, TraceTimeline, load_scenario_config, load_trace, synth_timeline
from .settings import configure_logging, load_settings
from .simulator import mean_ci, run_simulation

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILED = 2

SUMMARY_COLUMNS = [
    "sweep_variable",
    "sweep_value",
    "policy",
    "runs",
    "failed",
    "rate_mean",
    "rate_ci95",
    "processed_rate_mean",
    "processed_rate_ci95",
    "mean_tx_delay_s",
    "mean_compute_delay_s",
    "mean_total_delay_s",
    "bytes_lte_mean",
    "bytes_v2v_mean",
    "fallback_periods",
]


class Sweep(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variable: str
    values: List[Any] = Field(min_length=1)


class TraceRef(BaseModel):
    model_config = ConfigDict(extra="forbid")

    membership: str
    sinr: Optional[str] = None
    rates: Optional[str] = None


class ExperimentSpec(BaseModel):
    """One experiment: every (sweep value, policy, seed) combination is a run."""

    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    scenario: Optional[str] = None
    scenario_overrides: Dict[str, Any] = Field(default_factory=dict)
    trace: Optional[TraceRef] = None
    policies: List[Policy] = Field(min_length=1)
    sweep: Optional[Sweep] = None
    seeds: List[int] = Field(min_length=1)
    duration_s: float = Field(default=10.0, gt=0)
    solver: SolverOptions = Field(default_factory=SolverOptions)
    output_dir: str = "results"
    workers: int = Field(default=1, ge=1)

    _base_dir: Path = PrivateAttr(default_factory=Path.cwd)

    @field_validator("seeds")
    @classmethod
    def _distinct_seeds(cls, v):
        if len(set(v)) != len(v):
            raise ValueError("seeds must be distinct")
        return v

    def resolve(self, ref: str) -> Path:
        path = Path(ref)
        return path if path.is_absolute() else self._base_dir / path

    def base_config(self) -> ScenarioConfig:
        config = load_scenario_config(self.resolve(self.scenario)) if self.scenario else ScenarioConfig()
        for key, value in self.scenario_overrides.items():
            config = config.with_value(key, value)
        return config

    def sweep_configs(self) -> List[tuple[Any, ScenarioConfig]]:
        """(sweep value, config) pairs; every value is validated up front."""
        base = self.base_config()
        if self.sweep is None:
            return [(None, base)]
        out = []
        for value in self.sweep.values:
            try:
                out.append((value, base.with_value(self.sweep.variable, value)))
            except ValidationError as e:
                raise ConfigError(f"sweep value {self.sweep.variable}={value!r} is invalid: {e}") from e
        return out


def load_experiment(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text()
        raw = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
        spec = ExperimentSpec.model_validate(raw)
    except FileNotFoundError as e:
        raise ConfigError(f"experiment file not found: {path}") from e
    except (ValueError, yaml.YAMLError) as e:
        raise ConfigError(f"invalid experiment file {path}: {e}") from e
    spec._base_dir = path.parent.resolve()
    return spec


class RunSpec(BaseModel):
    """Fully resolved run; the manifest stores one per run so any row can be replayed."""

    run_id: str
    policy: Policy
    seed: int
    sweep_variable: Optional[str] = None
    sweep_value: Any = None
    duration_s: float
    scenario: Dict[str, Any]
    solver: Dict[str, Any]
    trace: Optional[Dict[str, Optional[str]]] = None
    csv: str


def _slug(value: Any) -> str:
    return re.sub(r"[^A-Za-z0-9.+-]+", "_", str(value)).strip("_") or "none"


def plan_runs(spec: ExperimentSpec, output_dir: Path) -> List[RunSpec]:
    trace = None
    if spec.trace is not None:
        trace = {
            key: str(spec.resolve(ref)) if ref else None
            for key, ref in spec.trace.model_dump().items()
        }
    runs = []
    variable = spec.sweep.variable if spec.sweep else None
    for idx, (value, config) in enumerate(spec.sweep_configs()):
        for policy in spec.policies:
            for seed in spec.seeds:
                run_id = f"{policy.value}_s{seed}" if variable is None else f"{policy.value}_{variable}-{_slug(value)}_s{seed}"
                runs.append(
                    RunSpec(
                        run_id=f"r{len(runs):04d}_{run_id}",
                        policy=policy,
                        seed=seed,
                        sweep_variable=variable,
                        sweep_value=value,
                        duration_s=spec.duration_s,
                        scenario=config.model_dump(mode="json"),
                        solver=spec.solver.model_dump(),
                        trace=trace,
                        csv=str(output_dir / "runs" / f"r{len(runs):04d}_{run_id}.csv"),
                    )
                )
    return runs


def _timeline(run: RunSpec, config: ScenarioConfig) -> TraceTimeline:
    if run.trace:
        return load_trace(run.trace["membership"], run.trace.get("sinr"), run.trace.get("rates"))
    return synth_timeline(config, run.duration_s, seed=run.seed)


def execute_run(run: RunSpec) -> Dict[str, Any]:
    """Simulate one run and write its per-period CSV; failures are returned, not raised."""
    try:
        config = ScenarioConfig.model_validate(run.scenario)
        options = SolverOptions.model_validate(run.solver)
        series = run_simulation(_timeline(run, config), config, run.policy, options, run.duration_s, run.seed)
        Path(run.csv).parent.mkdir(parents=True, exist_ok=True)
        series.write_csv(run.csv)
        return {"run_id": run.run_id, "status": "ok", "error": None, "summary": series.summary()}
    except Exception as e:
        logger.error(f"Run {run.run_id} failed: {type(e).__name__}: {e}")
        return {"run_id": run.run_id, "status": "failed", "error": f"{type(e).__name__}: {e}", "summary": None}


def _finite_mean(values: List[float]) -> float:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return sum(vals) / len(vals) if vals else math.nan


def summarize(runs: List[RunSpec], results: List[Dict[str, Any]]) -> pd.DataFrame:
    """One row per (sweep value, policy); seeds are the replications behind each interval."""
    groups: Dict[tuple, List[tuple[RunSpec, Dict[str, Any]]]] = {}
    for run, result in zip(runs, results):
        groups.setdefault((json.dumps(run.sweep_value), run.policy.value), []).append((run, result))

    rows = []
    for (_, policy), members in groups.items():
        run0 = members[0][0]
        ok = [r["summary"] for _, r in members if r["status"] == "ok"]
        rate_mean, rate_ci = mean_ci([s["rate_mean"] for s in ok])
        proc_mean, proc_ci = mean_ci([s["processed_rate_mean"] for s in ok])
        rows.append(
            {
                "sweep_variable": run0.sweep_variable or "",
                "sweep_value": "" if run0.sweep_value is None else run0.sweep_value,
                "policy": policy,
                "runs": len(members),
                "failed": len(members) - len(ok),
                "rate_mean": rate_mean,
                "rate_ci95": rate_ci,
                "processed_rate_mean": proc_mean,
                "processed_rate_ci95": proc_ci,
                "mean_tx_delay_s": _finite_mean([s["mean_tx_delay_s"] for s in ok]),
                "mean_compute_delay_s": _finite_mean([s["mean_compute_delay_s"] for s in ok]),
                "mean_total_delay_s": _finite_mean([s["mean_total_delay_s"] for s in ok]),
                "bytes_lte_mean": _finite_mean([s["bytes_lte_mean"] for s in ok]),
                "bytes_v2v_mean": _finite_mean([s["bytes_v2v_mean"] for s in ok]),
                "fallback_periods": sum(s["fallback_periods"] for s in ok),
            }
        )
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


@dataclass
class ExperimentResult:
    output_dir: Path
    summary_csv: Path
    manifest: Path
    runs: int
    failed: int


def execute(spec: ExperimentSpec, output_dir: Optional[str | Path] = None, workers: Optional[int] = None) -> ExperimentResult:
    """Run every combination of the spec and write per-run CSVs, summary.csv and manifest.json."""
    out = Path(output_dir) if output_dir else spec.resolve(spec.output_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    runs = plan_runs(spec, out)
    workers = workers or spec.workers
    logger.info(f"Experiment {spec.name}: {len(runs)} runs on {workers} worker(s) -> {out}")

    if workers > 1 and len(runs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(execute_run, runs))
    else:
        results = [execute_run(run) for run in runs]

    summary_path = out / "summary.csv"
    summarize(runs, results).to_csv(summary_path, index=False, float_format="%.9g")

    manifest = {
        "name": spec.name,
        "version": __version__,
        "experiment": spec.model_dump(mode="json"),
        "runs": [
            {**run.model_dump(mode="json"), "csv": str(Path(run.csv).relative_to(out)), **result}
            for run, result in zip(runs, results)
        ],
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(_json_safe(manifest), indent=2, sort_keys=True))

    failed = sum(1 for r in results if r["status"] != "ok")
    logger.info(f"Experiment {spec.name} finished: {len(runs) - failed} ok, {failed} failed")
    return ExperimentResult(out, summary_path, manifest_path, len(runs), failed)


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

def _solver_options(args) -> SolverOptions:
    settings = load_settings()
    data = settings.solver.model_dump()
    if getattr(args, "solver", None) in ("builtin", "highs"):
        data["backend"] = args.solver
    if getattr(args, "n_grid", None) is not None:
        data["n_grid"] = args.n_grid
    return SolverOptions.model_validate(data)


def _write_text(text: str, path: Optional[str]) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_run(args) -> int:
    spec = load_experiment(args.spec)
    result = execute(spec, args.output, args.workers)
    print(f"{result.runs - result.failed}/{result.runs} runs ok; summary: {result.summary_csv}")
    return EXIT_FAILED if result.failed else EXIT_OK


def cmd_assign(args) -> int:
    instance = load_instance(args.instance)
    options = _solver_options(args)
    if args.solver == "mps-export":
        problem, _ = build_p1(instance, options.n_grid, options.epsilon)
        _write_text(export_mps(problem), args.output)
        return EXIT_OK
    assignment, solution = assign(instance, Policy(args.policy), options, args.seed)
    report = verify_assignment(instance, assignment)
    _write_text(assignment.model_dump_json(indent=2), args.output)
    status = solution.status.value if solution else assignment.solver_status or "n/a"
    print(f"{assignment.total_tasks} tasks per period, status {status}, verification {'passed' if report.passed else 'FAILED'}", file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_INVALID


def cmd_verify(args) -> int:
    instance = load_instance(args.instance)
    assignment = Assignment.model_validate_json(Path(args.assignment).read_text())
    report = verify_assignment(instance, assignment, rel_tol=args.tolerance)
    for family, result in report.families.items():
        mark = "ok" if result.passed else "FAIL"
        print(f"{family:12s} {mark}")
        for violation in result.violations:
            print(f"    {violation}")
    return EXIT_OK if report.passed else EXIT_INVALID


def cmd_export_mps(args) -> int:
    instance = load_instance(args.instance)
    options = _solver_options(args)
    problem, _ = build_p1(instance, options.n_grid, options.epsilon)
    _write_text(export_mps(problem), args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="offload", description="Hybrid vertical/horizontal offloading experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="override the configured log level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute an experiment spec")
    p.add_argument("spec", help="experiment JSON/YAML file")
    p.add_argument("-o", "--output", default=None, help="output directory (default: the spec's output_dir)")
    p.add_argument("-j", "--workers", type=int, default=None, help="parallel runs")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("assign", help="compute one period's assignment")
    p.add_argument("--instance", required=True)
    p.add_argument("--solver", choices=["builtin", "highs", "auto", "mps-export"], default="builtin")
    p.add_argument("--policy", choices=[pol.value for pol in Policy], default=Policy.HYBRID.value)
    p.add_argument("--n-grid", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("verify", help="check an assignment against the true constraints")
    p.add_argument("--instance", required=True)
    p.add_argument("--assignment", required=True)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-mps", help="write the linearized problem as MPS")
    p.add_argument("--instance", required=True)
    p.add_argument("--n-grid", type=int, default=None)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_export_mps)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings()
        if args.log_level:
            settings.logging.level = args.log_level
        configure_logging(settings.logging)
        return args.func(args)
    except (ConfigError, InstanceValidationError, MilpValidationError, ValidationError) as e:
        logger.error(f"Validation error: {e}")
        return EXIT_INVALID
    except (OffloadError, OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
