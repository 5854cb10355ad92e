"""HTTP/JSON API for the reader study.

Endpoints (all errors are JSON ``{code, message}``):

* ``POST /sessions`` ``{reader_id, seed?, force?}`` -> session view
* ``GET /sessions/{id}/next`` -> case descriptor (opaque token, sequences,
  slice counts); 409 ``session_complete`` after the 100th answer
* ``GET /slices/{token}/{sequence}/{axis}/{index}`` -> image/png
* ``POST /sessions/{id}/responses`` ``{token, answer, duration_ms}``
* ``GET /sessions/{id}/report`` -> reader-vs-model report

Client-visible payloads never carry case ids, pathology, ground truth,
predictions, or post-contrast imaging: blinding is enforced at this layer.
"""

from __future__ import annotations

import zlib
from pathlib import Path

from fastapi import Depends, FastAPI, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .. import DEFAULT_SEED
from ..errors import (
    DegenerateInputError,
    EngineError,
    InputOutputError,
    ValidationError,
)
from ..pipeline import load_manifest
from .render import render_slice
from .store import (
    CapacityError,
    DuplicateSessionError,
    OrderingError,
    ReaderStudyStore,
    SessionCompleteError,
    SessionIncompleteError,
    SessionState,
    UnknownSessionError,
    UnknownTokenError,
)

_STATUS = {
    UnknownSessionError: (404, "unknown_session"),
    UnknownTokenError: (404, "unknown_token"),
    OrderingError: (409, "ordering_error"),
    SessionCompleteError: (409, "session_complete"),
    SessionIncompleteError: (409, "session_incomplete"),
    CapacityError: (409, "capacity_error"),
    DuplicateSessionError: (409, "duplicate_session"),
    DegenerateInputError: (400, "degenerate_input"),
    ValidationError: (400, "validation_error"),
    InputOutputError: (500, "io_error"),
}


class CreateSessionRequest(BaseModel):
    reader_id: str = Field(min_length=1)
    seed: int | None = None
    force: bool = False


class SessionView(BaseModel):
    session_id: str
    reader_id: str
    seed: int
    n_cases: int
    cursor: int
    status: str
    created_at: float


class NextCaseView(BaseModel):
    token: str
    position: int
    total: int
    sequences: list[str]
    slice_counts: dict[str, int]


class ResponseRequest(BaseModel):
    token: str
    answer: str
    duration_ms: int = Field(ge=0, default=0)


class ResponseAck(BaseModel):
    cursor: int
    status: str
    replay: bool


def _view(state: SessionState) -> SessionView:
    return SessionView(
        session_id=state.session_id,
        reader_id=state.reader_id,
        seed=state.seed,
        n_cases=len(state.case_order),
        cursor=state.cursor,
        status=state.status,
        created_at=state.created_at,
    )


def default_reader_seed(reader_id: str) -> int:
    """Per-reader fallback seed so unseeded sessions still differ by reader."""
    return DEFAULT_SEED + zlib.crc32(reader_id.encode())


def create_app_from_store(
    store: ReaderStudyStore, bearer_token: str | None = None
) -> FastAPI:
    app = FastAPI(title="enhanceval reader study", version="1")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.store = store

    async def require_auth(request: Request):
        if bearer_token is None:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {bearer_token}":
            raise _Unauthorized()

    class _Unauthorized(Exception):
        pass

    @app.exception_handler(_Unauthorized)
    async def unauthorized_handler(request: Request, exc: _Unauthorized):
        return JSONResponse(
            status_code=401,
            content={"code": "unauthorized", "message": "missing or bad bearer token"},
        )

    @app.exception_handler(EngineError)
    async def engine_error_handler(request: Request, exc: EngineError):
        for klass, (status, code) in _STATUS.items():
            if isinstance(exc, klass):
                return JSONResponse(
                    status_code=status, content={"code": code, "message": str(exc)}
                )
        return JSONResponse(
            status_code=500, content={"code": "internal_error", "message": str(exc)}
        )

    @app.post("/sessions", response_model=SessionView, dependencies=[Depends(require_auth)])
    def create_session(body: CreateSessionRequest) -> SessionView:
        seed = body.seed if body.seed is not None else default_reader_seed(body.reader_id)
        return _view(store.create_session(body.reader_id, seed, force=body.force))

    @app.get(
        "/sessions/{session_id}",
        response_model=SessionView,
        dependencies=[Depends(require_auth)],
    )
    def get_session(session_id: str) -> SessionView:
        return _view(store.get_session(session_id))

    @app.get(
        "/sessions/{session_id}/next",
        response_model=NextCaseView,
        dependencies=[Depends(require_auth)],
    )
    def next_case(session_id: str) -> NextCaseView:
        return NextCaseView(**store.next_case(session_id))

    @app.get("/slices/{token}/{sequence}/{axis}/{index}", dependencies=[Depends(require_auth)])
    def get_slice(token: str, sequence: str, axis: str, index: int) -> Response:
        volume = store.volume_for_token(token, sequence)
        return Response(content=render_slice(volume, axis, index), media_type="image/png")

    @app.post(
        "/sessions/{session_id}/responses",
        response_model=ResponseAck,
        dependencies=[Depends(require_auth)],
    )
    def record_response(session_id: str, body: ResponseRequest) -> ResponseAck:
        state, replay = store.record_response(
            session_id, body.token, body.answer, body.duration_ms
        )
        return ResponseAck(cursor=state.cursor, status=state.status, replay=replay)

    @app.get("/sessions/{session_id}/report", dependencies=[Depends(require_auth)])
    def session_report(session_id: str) -> dict:
        return store.session_report(session_id)

    return app


def create_app(
    manifest_path: str | Path,
    journal_dir: str | Path,
    bearer_token: str | None = None,
    min_pred_volume_cm3: float = 0.0,
) -> FastAPI:
    records = load_manifest(manifest_path)
    store = ReaderStudyStore(
        records, journal_dir, min_pred_volume_cm3=min_pred_volume_cm3
    )
    return create_app_from_store(store, bearer_token=bearer_token)
