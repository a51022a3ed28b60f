"""HTTP facade over the dual index for the web UI and programmatic clients.

Identity is a trusted `X-Principals` header (comma separated); every route
filters results by visibility. Relative time tokens in queries resolve
against the store's injectable clock, so responses are reproducible under a
frozen clock.
"""

from __future__ import annotations

import os

from fastapi import FastAPI, Header, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .model import epoch_to_iso8601
from .store import IndexStore, QueryFormatError, UnknownFieldError


class QueryPayload(BaseModel):
    where: dict | None = None
    sort: str | None = None
    descending: bool = False
    limit: int = Field(default=100, ge=0, le=10_000)
    offset: int = Field(default=0, ge=0)


def _principals(header: str | None) -> set[str]:
    if not header:
        return set()
    parts = {p.strip() for p in header.split(",")}
    parts.discard("")
    return parts


def create_app(primary: IndexStore, aggregate: IndexStore,
               static_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="fsidx query service", version="1.0")

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": "malformed request",
                                                      "detail": exc.errors()})

    @app.exception_handler(QueryFormatError)
    async def _bad_query(request: Request, exc: QueryFormatError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(UnknownFieldError)
    async def _unknown_field(request: Request, exc: UnknownFieldError):
        return JSONResponse(status_code=422, content={"error": str(exc),
                                                      "field": exc.field})

    def _require_principals(header: str | None):
        principals = _principals(header)
        if not principals:
            return None
        principals.add("public")
        return principals

    @app.get("/v1/health")
    async def health():
        return {
            "status": "ok",
            "primary_records": primary.count_live(),
            "aggregate_records": aggregate.count_live(),
        }

    @app.post("/v1/query")
    async def query_primary(payload: QueryPayload,
                            x_principals: str | None = Header(default=None)):
        principals = _require_principals(x_principals)
        if principals is None:
            return JSONResponse(status_code=403, content={"error": "no principals supplied"})
        return primary.query(payload.model_dump(), principals)

    @app.post("/v1/aggregate/query")
    async def query_aggregate(payload: QueryPayload,
                              x_principals: str | None = Header(default=None)):
        principals = _require_principals(x_principals)
        if principals is None:
            return JSONResponse(status_code=403, content={"error": "no principals supplied"})
        return aggregate.query(payload.model_dump(), principals)

    @app.get("/v1/aggregate/top")
    async def aggregate_top(field: str, k: int = 10, kind: str | None = None,
                            x_principals: str | None = Header(default=None)):
        principals = _require_principals(x_principals)
        if principals is None:
            return JSONResponse(status_code=403, content={"error": "no principals supplied"})
        if kind not in (None, "user", "group", "dir"):
            return JSONResponse(status_code=400,
                                content={"error": f"unknown principal kind: {kind}"})
        return {"field": field, "kind": kind, "results": aggregate.top_k(field, k, kind, principals)}

    @app.get("/v1/summary/{subject:path}")
    async def summary(subject: str, x_principals: str | None = Header(default=None)):
        principals = _require_principals(x_principals)
        if principals is None:
            return JSONResponse(status_code=403, content={"error": "no principals supplied"})
        entry = aggregate.get(subject, principals)
        if entry is None:
            return JSONResponse(status_code=404,
                                content={"error": f"no aggregate record for {subject}"})
        return build_summary(entry, clock=aggregate.clock)

    if static_dir and os.path.isdir(static_dir):
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app


def build_summary(entry: dict, clock) -> dict:
    """Fill the fixed summary template from one aggregate record."""
    content = entry["content"]
    now = int(clock())
    last_access = content.get("atime_max")
    summary = {
        "subject": entry["subject"],
        "kind": entry["subject"].partition(":")[0],
        "file_count": content.get("file_count"),
        "storage": {
            "total": content.get("size_total"),
            "mean": content.get("size_mean"),
            "min": content.get("size_min"),
            "max": content.get("size_max"),
            "quantiles": {
                label: content.get(f"size_{label}")
                for label in ("p10", "p25", "p50", "p75", "p90", "p99")
            },
        },
        "activity": {
            "last_access": epoch_to_iso8601(int(last_access)) if last_access else None,
            "median_access": epoch_to_iso8601(int(content["atime_p50"]))
            if content.get("atime_p50") else None,
            "days_since_last_access": round((now - last_access) / 86400, 1)
            if last_access else None,
            "last_modified": epoch_to_iso8601(int(content["mtime_max"]))
            if content.get("mtime_max") else None,
        },
        "version": entry.get("version"),
    }
    return summary


def serve(index_root: str, host: str = "127.0.0.1", port: int = 8080,
          static_dir: str | None = None) -> None:
    """Open both stores under one root directory and run the service."""
    import uvicorn

    primary = IndexStore(os.path.join(index_root, "primary"), kind="primary")
    aggregate = IndexStore(os.path.join(index_root, "aggregate"), kind="aggregate")
    app = create_app(primary, aggregate, static_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
