"""FastAPI application exposing the simulator.

Error contract: invalid configs answer 422 (either pydantic's request
validation or a ConfigError raised deeper in the harness), numeric blow-ups
during a run answer 400 with kind "numeric". Both carry a structured detail
body so clients can branch on the kind without parsing prose.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..config import ConfigError
from ..experiments import (
    compare_experiments,
    loss_rows,
    run_experiment,
    run_report_obj,
    sweep_experiments,
    timeline_report,
    version_rows,
)
from ..linalg import NumericError
from ..runtime import STRATEGY_KINDS
from .schemas import (
    CompareRequest,
    CompareResponse,
    HealthResponse,
    RunRequest,
    RunResponse,
    SweepRequest,
    SweepResponse,
    TimelineRequest,
    TimelineResponse,
)


def create_app() -> FastAPI:
    app = FastAPI(title="pipesim", version=__version__)

    @app.exception_handler(ConfigError)
    async def _config_error(request: Request, exc: ConfigError) -> JSONResponse:
        return JSONResponse(
            status_code=422,
            content={"detail": {"kind": "config", "message": str(exc)}},
        )

    @app.exception_handler(NumericError)
    async def _numeric_error(request: Request, exc: NumericError) -> JSONResponse:
        return JSONResponse(
            status_code=400,
            content={"detail": {"kind": "numeric", "message": str(exc)}},
        )

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(
            status="ok", version=__version__, strategies=list(STRATEGY_KINDS)
        )

    @app.post("/run", response_model=RunResponse)
    def run(req: RunRequest) -> RunResponse:
        res = run_experiment(req.config, seed_override=req.seed)
        return RunResponse(
            report=run_report_obj(res),
            losses=loss_rows(res),
            versions=version_rows(res),
        )

    @app.post("/compare", response_model=CompareResponse)
    def compare(req: CompareRequest) -> CompareResponse:
        return CompareResponse(rows=compare_experiments(req.configs))

    @app.post("/timeline", response_model=TimelineResponse)
    def timeline(req: TimelineRequest) -> TimelineResponse:
        rep = timeline_report(req.config)
        return TimelineResponse(timeline=rep["timeline"], stats=rep["stats"])

    @app.post("/sweep", response_model=SweepResponse)
    def sweep(req: SweepRequest) -> SweepResponse:
        rows, summary = sweep_experiments(
            req.config, req.axis, list(req.values), seeds=req.seeds
        )
        return SweepResponse(rows=rows, summary=summary)

    return app
