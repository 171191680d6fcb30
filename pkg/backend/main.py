from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from fastapi import BackgroundTasks, FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel, Field

# Load environment from .env if present
try:
    from dotenv import load_dotenv
    load_dotenv()
except Exception:
    pass

from app import __version__
from app.assignment import Assignment, Policy, assign, build_p1, verify_assignment
from app.cli import ExperimentSpec, execute
from app.errors import ConfigError, InstanceValidationError, MilpValidationError, OffloadError
from app.milp import SolverOptions
from app.model import InstanceDocument
from app.mps import export_mps
from app.settings import configure_logging, load_settings

try:
    from . import runs as run_store
except ImportError:
    import runs as run_store

logger = logging.getLogger(__name__)

settings = load_settings()

app = FastAPI(title="Offloading API", version=__version__)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.on_event("startup")
def _startup() -> None:
    configure_logging(settings.logging)
    run_store.set_db_path(settings.service.runs_db)
    try:
        run_store.init_db()
    except Exception as e:
        logger.error(f"Could not initialize runs database: {e}")


def _http_error(e: Exception) -> HTTPException:
    if isinstance(e, InstanceValidationError):
        return HTTPException(status_code=422, detail={"message": "invalid instance", "violations": e.violations})
    if isinstance(e, MilpValidationError):
        return HTTPException(status_code=422, detail=str(e))
    if isinstance(e, (ConfigError, ValueError)):
        return HTTPException(status_code=400, detail=str(e))
    return HTTPException(status_code=500, detail=f"{type(e).__name__}: {e}")


class AssignIn(BaseModel):
    instance: InstanceDocument
    policy: Policy = Policy.HYBRID
    options: Optional[SolverOptions] = None
    seed: int = 0


class VerifyIn(BaseModel):
    instance: InstanceDocument
    assignment: Assignment
    rel_tol: float = Field(default=1e-9, ge=0)


class ExportMpsIn(BaseModel):
    instance: InstanceDocument
    n_grid: int = Field(default=5, ge=2)
    epsilon: float = Field(default=0.999, gt=0, lt=1)


class RunOut(BaseModel):
    id: int
    name: str
    status: Optional[str]
    started_at: Optional[str]
    finished_at: Optional[str]
    output_dir: Optional[str]
    metadata: Dict[str, Any] = Field(default_factory=dict)


@app.get("/health")
def health() -> Dict[str, Any]:
    return {"ok": True}


@app.get("/version")
def version() -> Dict[str, Any]:
    return {"version": app.version}


@app.post("/assign")
def api_assign(payload: AssignIn) -> Dict[str, Any]:
    try:
        instance = payload.instance.to_instance()
        options = payload.options or SolverOptions.from_settings(settings.solver)
        assignment, solution = assign(instance, payload.policy, options, payload.seed)
        report = verify_assignment(instance, assignment)
    except OffloadError as e:
        raise _http_error(e)
    solver = None
    if solution is not None:
        solver = {
            "status": solution.status.value,
            "objective": solution.objective,
            "gap": solution.gap,
            "nodes": solution.nodes_explored,
            "backend": solution.backend,
        }
    return {
        "ok": True,
        "assignment": assignment.model_dump(mode="json"),
        "report": report.model_dump(mode="json"),
        "passed": report.passed,
        "solver": solver,
    }


@app.post("/verify")
def api_verify(payload: VerifyIn) -> Dict[str, Any]:
    try:
        instance = payload.instance.to_instance()
        report = verify_assignment(instance, payload.assignment, payload.rel_tol)
    except OffloadError as e:
        raise _http_error(e)
    return {"ok": report.passed, "failures": report.failures(), "report": report.model_dump(mode="json")}


@app.post("/export-mps", response_class=PlainTextResponse)
def api_export_mps(payload: ExportMpsIn) -> str:
    try:
        problem, _ = build_p1(payload.instance.to_instance(), payload.n_grid, payload.epsilon)
        return export_mps(problem)
    except OffloadError as e:
        raise _http_error(e)


def _run_experiment(run_id: int, spec: ExperimentSpec, output_dir: str) -> None:
    run_store.update_run(run_id, "running")
    try:
        result = execute(spec, output_dir, settings.service.workers)
        status = "done" if result.failed == 0 else "done_with_failures"
        run_store.update_run(
            run_id,
            status,
            {"runs": result.runs, "failed": result.failed, "summary_csv": str(result.summary_csv), "manifest": str(result.manifest)},
            finished=True,
        )
    except Exception as e:
        logger.error(f"Experiment run {run_id} failed: {e}")
        run_store.update_run(run_id, "failed", {"error": f"{type(e).__name__}: {e}"}, finished=True)


@app.post("/runs")
def api_start_run(spec: ExperimentSpec, background_tasks: BackgroundTasks):
    try:
        spec.sweep_configs()
    except (OffloadError, ValueError) as e:
        raise _http_error(e)
    run_id = run_store.create_run(spec.name, "", {"experiment": spec.model_dump(mode="json")})
    output_dir = str(Path(settings.service.artifacts_dir) / f"run_{run_id:05d}")
    run_store.set_output_dir(run_id, output_dir)
    background_tasks.add_task(_run_experiment, run_id, spec, output_dir)
    logger.info(f"Queued experiment {spec.name} as run {run_id}")
    return JSONResponse(content={"ok": True, "run_id": run_id, "output_dir": output_dir}, status_code=202)


@app.get("/runs", response_model=List[RunOut])
def api_list_runs(limit: int = 50) -> List[RunOut]:
    return [RunOut(**r) for r in run_store.list_runs(limit)]


@app.get("/runs/{run_id}", response_model=RunOut)
def api_get_run(run_id: int) -> RunOut:
    row = run_store.get_run(run_id)
    if not row:
        raise HTTPException(status_code=404, detail="run not found")
    return RunOut(**row)
