"""HTTP adapter over the service core.

JSON request/response endpoints under ``/api`` plus one Server-Sent-Events
stream per subscription channel. Streams carry a sequence number as the
SSE ``id``; clients resume with ``?since=<seq>`` or the ``Last-Event-ID``
header. Slow consumers whose resume point has left the bounded buffer get
one ``error`` event and are disconnected. See ``docs/wire-api.md``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Header, Query, Request, Response
from fastapi.responses import JSONResponse, StreamingResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from ..errors import (
    AddressError,
    AuthError,
    BusyError,
    ControlHeldError,
    DatasetError,
    DeviceError,
    GratingscopeError,
    InterlockError,
    RateLimitedError,
    RetrievalInputError,
    ScanError,
)
from .core import ControlService

_STATUS_CODES = [
    (RateLimitedError, 429),
    (AuthError, 401),
    (ControlHeldError, 409),
    (BusyError, 409),
    (InterlockError, 409),
    (AddressError, 404),
    (DeviceError, 502),
    (DatasetError, 400),
    (RetrievalInputError, 400),
    (ScanError, 400),
]

HEARTBEAT_S = 1.0


class LoginBody(BaseModel):
    user: str
    password: str


class StageBody(BaseModel):
    device: int
    motor_type: str
    axis: str
    action: str
    value: Optional[float] = None


class TubeBody(BaseModel):
    on: bool
    kv: Optional[float] = None
    ma: Optional[float] = None


class ScanBody(BaseModel):
    mode: str = "B"
    steps: int = 50
    frames_to_average: int = 30
    exposure_s: float = 0.1
    seed: int = 0
    name: Optional[str] = None
    roi: Optional[list[int]] = None


class RetrievalBody(BaseModel):
    sample_path: str
    reference_path: str
    roi: Optional[list[int]] = None
    margin_rows: Optional[int] = None
    lo_pct: float = 1.0
    hi_pct: float = 99.0


class NoteBody(BaseModel):
    text: str


class LiveBody(BaseModel):
    on: bool


def _status_for(exc: GratingscopeError) -> int:
    for cls, code in _STATUS_CODES:
        if isinstance(exc, cls):
            return code
    return 400


def _token(authorization: Optional[str]) -> Optional[str]:
    if authorization and authorization.lower().startswith("bearer "):
        return authorization[7:].strip()
    return authorization


def create_app(core: ControlService, frontend_dir: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="gratingscope control service", docs_url=None, redoc_url=None)

    @app.exception_handler(GratingscopeError)
    async def _handle(request: Request, exc: GratingscopeError):
        return JSONResponse(
            status_code=_status_for(exc),
            content={"error": type(exc).__name__, "detail": str(exc)},
        )

    @app.post("/api/login")
    def login(body: LoginBody):
        return core.login(body.user, body.password)

    @app.post("/api/logout")
    def logout(authorization: Optional[str] = Header(default=None)):
        return core.logout(_token(authorization))

    @app.post("/api/control/release")
    def control_release(authorization: Optional[str] = Header(default=None)):
        return core.control_release(_token(authorization))

    @app.get("/api/status")
    def status(authorization: Optional[str] = Header(default=None)):
        return core.status(_token(authorization))

    @app.get("/api/config")
    def config(authorization: Optional[str] = Header(default=None)):
        core.read_session(_token(authorization))
        g = core.beamline.geometry
        stages = [
            {"device": s.device, "axis": s.axis, "motor_type": s.motor_type,
             "steps_per_unit": s.steps_per_unit, "unit": s.unit}
            for s in core.config.stages
        ]
        return {
            "geometry": {"p0": g.p0, "p1": g.p1, "p2": g.p2, "l": g.l, "d": g.d,
                         "wavelength": g.wavelength},
            "fringe": {
                "p2_equiv_um": core.beamline.fringe.p2_equiv_um,
                "reference_visibility": core.beamline.fringe.reference_visibility,
            },
            "scan_defaults": {
                "mode": core.config.scan.mode,
                "steps": core.config.scan.steps,
                "frames_to_average": core.config.scan.frames_to_average,
                "exposure_s": core.config.scan.exposure_s,
            },
            "stages": stages,
        }

    @app.post("/api/stage/command")
    def stage_command(body: StageBody, authorization: Optional[str] = Header(default=None)):
        return core.stage_command(
            _token(authorization), device=body.device, motor_type=body.motor_type,
            axis=body.axis, action=body.action, value=body.value,
        )

    @app.post("/api/tube")
    def tube(body: TubeBody, authorization: Optional[str] = Header(default=None)):
        return core.tube_set(_token(authorization), on=body.on, voltage_kv=body.kv,
                             current_ma=body.ma)

    @app.post("/api/detector/live")
    def detector_live(body: LiveBody, authorization: Optional[str] = Header(default=None)):
        return core.detector_live(_token(authorization), on=body.on)

    @app.post("/api/scan/start")
    def scan_start(body: ScanBody, authorization: Optional[str] = Header(default=None)):
        return core.scan_start(
            _token(authorization), mode=body.mode, steps=body.steps,
            frames_to_average=body.frames_to_average, exposure_s=body.exposure_s,
            seed=body.seed, name=body.name, roi=body.roi,
        )

    @app.post("/api/scan/abort")
    def scan_abort(authorization: Optional[str] = Header(default=None)):
        return core.scan_abort(_token(authorization))

    @app.get("/api/scan/status")
    def scan_status(authorization: Optional[str] = Header(default=None)):
        return core.scan_status(_token(authorization))

    @app.post("/api/retrieval")
    def retrieval_submit(body: RetrievalBody,
                         authorization: Optional[str] = Header(default=None)):
        return core.retrieval_submit(
            _token(authorization), sample_path=body.sample_path,
            reference_path=body.reference_path, roi=body.roi,
            margin_rows=body.margin_rows, lo_pct=body.lo_pct, hi_pct=body.hi_pct,
        )

    @app.get("/api/retrieval/{job_id}")
    def retrieval_status(job_id: str, authorization: Optional[str] = Header(default=None)):
        return core.retrieval_status(_token(authorization), job_id)

    @app.get("/api/retrieval/{job_id}/preview/{channel}")
    def retrieval_preview(job_id: str, channel: str,
                          authorization: Optional[str] = Header(default=None),
                          token: Optional[str] = Query(default=None)):
        data = core.retrieval_preview(token or _token(authorization), job_id, channel)
        return Response(content=data, media_type="image/x-portable-graymap")

    @app.get("/api/retrieval/{job_id}/profile")
    def retrieval_profile(job_id: str, channel: str, x0: float, y0: float,
                          x1: float, y1: float,
                          authorization: Optional[str] = Header(default=None)):
        return core.retrieval_profile(_token(authorization), job_id, channel,
                                      x0, y0, x1, y1)

    @app.post("/api/notes")
    def add_note(body: NoteBody, authorization: Optional[str] = Header(default=None)):
        return core.add_note(_token(authorization), text=body.text)

    @app.get("/api/history")
    def history(limit: int = 100, authorization: Optional[str] = Header(default=None)):
        return core.history_list(_token(authorization), limit=limit)

    @app.get("/api/history/stats")
    def history_stats(authorization: Optional[str] = Header(default=None)):
        return core.history_stats(_token(authorization))

    @app.get("/api/datasets")
    def datasets(authorization: Optional[str] = Header(default=None)):
        return core.datasets_list(_token(authorization))

    @app.get("/api/stream/{channel}")
    def stream(channel: str, since: int = 0,
               authorization: Optional[str] = Header(default=None),
               token: Optional[str] = Query(default=None),
               last_event_id: Optional[str] = Header(default=None, alias="Last-Event-ID")):
        core.read_session(token or _token(authorization))
        buffer = core.stream_buffer(channel)
        cursor = since
        if last_event_id:
            try:
                cursor = max(cursor, int(last_event_id))
            except ValueError:
                pass
        explicit_resume = cursor > 0

        def generate():
            position = cursor
            # an explicit resume (or any delivery) promises continuity; a
            # later overflow means lost events, so the consumer is dropped
            continuity = explicit_resume
            while True:
                events, overflowed, closed = buffer.read_since(position, timeout=HEARTBEAT_S)
                if overflowed and continuity:
                    yield (
                        "event: error\ndata: "
                        + json.dumps({"error": "overflow",
                                      "detail": "resume point left the buffer window"})
                        + "\n\n"
                    )
                    return
                if closed:
                    return
                if not events:
                    yield "event: heartbeat\ndata: {}\n\n"
                    continue
                for seq, payload in events:
                    yield f"id: {seq}\ndata: {json.dumps(payload)}\n\n"
                    position = seq
                continuity = True

        return StreamingResponse(generate(), media_type="text/event-stream",
                                 headers={"Cache-Control": "no-cache"})

    if frontend_dir:
        dist = Path(frontend_dir)
        if dist.is_dir():
            app.mount("/ui", StaticFiles(directory=str(dist), html=True), name="console")

    return app
