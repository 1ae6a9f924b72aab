"""HTTP facade over the runner: bundles in, artifacts out.

The service owns no state; every request carries a complete bundle and
returns the artifact texts, so responses are as reproducible as the
underlying engine.  Error responses carry the machine-readable code of
the failed check: 400 for anything wrong with the request, 500 when an
internal invariant breaks.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict

from . import __version__
from .errors import HybridSimError, InternalInvariantError
from .runner import execute_bundle, validate_bundle


class RunBundle(BaseModel):
    """Envelope for a run request; sections beyond these pass through."""

    model_config = ConfigDict(extra="allow")

    mode: str = "simulate"
    seed: int = 0


class RunResponse(BaseModel):
    artifacts: dict[str, str]


class ValidateResponse(BaseModel):
    valid: bool
    errors: list[str]


class ErrorBody(BaseModel):
    code: str
    message: str


class Health(BaseModel):
    status: str
    version: str


def create_app() -> FastAPI:
    app = FastAPI(title="hybridsim", version=__version__)

    @app.exception_handler(InternalInvariantError)
    async def internal_error(request: Request, exc: InternalInvariantError):
        return JSONResponse(
            status_code=500,
            content=ErrorBody(code="INTERNAL", message=str(exc)).model_dump(),
        )

    @app.exception_handler(HybridSimError)
    async def user_error(request: Request, exc: HybridSimError):
        return JSONResponse(
            status_code=400,
            content=ErrorBody(code=exc.code, message=str(exc)).model_dump(),
        )

    @app.get("/health", response_model=Health)
    async def health() -> Health:
        return Health(status="ok", version=__version__)

    @app.post("/run", response_model=RunResponse, responses={400: {"model": ErrorBody}})
    async def run(bundle: RunBundle) -> RunResponse:
        return RunResponse(artifacts=execute_bundle(bundle.model_dump()))

    @app.post("/validate", response_model=ValidateResponse)
    async def validate(bundle: RunBundle) -> ValidateResponse:
        errors = validate_bundle(bundle.model_dump())
        return ValidateResponse(valid=not errors, errors=errors)

    return app


app = create_app()
