"""Service core: serializes device access, audits every mutating call.

The HTTP layer (:mod:`gratingscope.service.app`) is a thin adapter over
this class; all behavior lives here so it can be driven and tested
in-process. Rules enforced here:

- every call to a mutating method appends exactly one history entry,
  success or failure; authentication rejections on read methods append one
  entry as well;
- device mutations take the interlock lock: motion commands are rejected
  while a scan runs (stop is allowed and aborts the scan);
- one session at a time holds device control; admins may take it over;
- one scan at a time; one retrieval job runs per submitted id.
"""

from __future__ import annotations

import base64
import functools
import math
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .. import _kernels
from ..acquisition import AcquisitionEngine, Roi, ScanConfig
from ..config import StageInfo, SystemConfig
from ..dataset import dataset_summary, load_dataset, save_result_maps
from ..errors import (
    AddressError,
    AuthError,
    BusyError,
    ConfigError,
    ControlHeldError,
    DeviceError,
    GratingscopeError,
    InterlockError,
    RetrievalInputError,
    ScanError,
)
from ..protocol import (
    MOVE_KINDS,
    Command,
    CommandKind,
    ControllerBank,
    execute as protocol_execute,
    format_command,
    parse_command,
)
from ..retrieval import run_retrieval, window_image, write_pgm
from .auth import ROLE_ADMIN, CredentialStore, SessionManager, create_credential_file
from .events import EventBuffer
from .history import HistoryLog

DEFAULT_ACCOUNTS = (("operator", "changeme", "operator"), ("admin", "changeme-admin", "admin"))

_STAGE_ACTIONS = {
    "move_rel": CommandKind.MOVE_RELATIVE,
    "move_abs": CommandKind.MOVE_ABSOLUTE,
    "set_velocity": CommandKind.SET_VELOCITY,
    "query": CommandKind.POSITION_QUERY,
    "home_pos": CommandKind.MOVE_POS_LIMIT,
    "home_neg": CommandKind.MOVE_NEG_LIMIT,
    "zero": CommandKind.ZERO_POSITION,
    "stop": CommandKind.ESTOP_AXIS,
}
_MOTION_ACTIONS = {"move_rel", "move_abs", "home_pos", "home_neg"}


@dataclass(slots=True)
class EmittedCommand:
    """One byte string sent to a motor controller, for audit and tests."""

    timestamp: float
    controller: int
    data: bytes
    is_move: bool
    scan_running: bool


class MotorLink:
    """Formats commands to protocol bytes and drives the controller bank.

    Every emission is logged with the scan state at the moment of sending;
    emitting a move while a scan runs raises (defense in depth on top of
    the service-level interlock).
    """

    def __init__(self, bank: ControllerBank) -> None:
        self.bank = bank
        self.lock = threading.Lock()
        self.emissions: list[EmittedCommand] = []

    def execute(self, controller_id: int, cmd: Command, scan_running: bool) -> str:
        is_move = cmd.kind in MOVE_KINDS
        if is_move and scan_running:
            raise InterlockError("motion refused: a scan is running")
        data = format_command(cmd)
        with self.lock:
            ctrl = self.bank.controllers[controller_id]
            if not ctrl.connected and cmd.kind is not CommandKind.CONNECT:
                protocol_execute(Command(CommandKind.CONNECT), ctrl)
            self.emissions.append(EmittedCommand(
                timestamp=time.time(), controller=controller_id, data=data,
                is_move=is_move, scan_running=scan_running,
            ))
            reply, _ = protocol_execute(parse_command(data), ctrl)
        return reply.decode("ascii")

    def move_emissions_during_scan(self) -> list[EmittedCommand]:
        with self.lock:
            return [e for e in self.emissions if e.is_move and e.scan_running]


def _mutating(action: str, target: str = "service"):
    """Wrap a core method: validate session, run, append exactly one entry."""

    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(self: "ControlService", token: Optional[str], *args, **kwargs):
            user = "?"
            outcome = "ok"
            params = {k: v for k, v in kwargs.items() if _jsonable(v)}
            try:
                session = self.sessions.validate(token)
                user = session.user
                result = fn(self, session, *args, **kwargs)
                return result
            except GratingscopeError as exc:
                outcome = f"rejected: {type(exc).__name__}"
                params["error"] = str(exc)
                raise
            except Exception as exc:
                outcome = f"error: {type(exc).__name__}"
                params["error"] = str(exc)
                raise
            finally:
                self.history.append(user=user, action=action, target=target,
                                    params=params, outcome=outcome)

        return wrapper

    return decorate


def _jsonable(value) -> bool:
    return isinstance(value, (str, int, float, bool, type(None), list, tuple, dict))


class ControlService:
    def __init__(self, config: SystemConfig, auto_tick: bool = True) -> None:
        self.config = config
        self.data_dir = Path(config.service.data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        (self.data_dir / "datasets").mkdir(exist_ok=True)
        (self.data_dir / "retrievals").mkdir(exist_ok=True)

        cred_path = config.service.credentials_path()
        if not cred_path.exists():
            create_credential_file(cred_path, DEFAULT_ACCOUNTS)
        self.credentials = CredentialStore(cred_path)
        self.sessions = SessionManager(
            self.credentials,
            ttl_s=config.service.session_ttl_s,
            failure_limit=config.service.login_failure_limit,
            cooldown_s=config.service.login_cooldown_s,
        )
        self.history = HistoryLog(self.data_dir / "history.log")

        self.beamline = config.build_beamline()
        self.engine = AcquisitionEngine(self.beamline)
        self.bank = ControllerBank()
        self.link = MotorLink(self.bank)

        self.buffers = {
            "live_frames": EventBuffer(config.service.stream_buffer),
            "shift_curve": EventBuffer(config.service.stream_buffer),
            "scan_events": EventBuffer(config.service.stream_buffer),
        }

        self._interlock = threading.RLock()
        self._device_lock = threading.RLock()
        self._control_token: Optional[str] = None
        self._scan_thread: Optional[threading.Thread] = None
        self._scan_abort = threading.Event()
        self._scan_state: dict = {"state": "idle", "scan_id": None}
        self._scan_counter = 0
        self._jobs: dict[str, dict] = {}
        self._job_threads: list[threading.Thread] = []
        self._live_stop = threading.Event()
        self._live_thread: Optional[threading.Thread] = None
        self._last_preview = 0.0
        self._shutdown = False

        self._recover_jobs()
        self._ticker: Optional[threading.Thread] = None
        if auto_tick:
            self._ticker = threading.Thread(target=self._tick_loop, daemon=True,
                                            name="service-motor-ticker")
            self._ticker.start()

    # -- lifecycle -------------------------------------------------------------

    def _tick_loop(self) -> None:
        last = time.monotonic()
        while not self._shutdown:
            time.sleep(0.01)
            now = time.monotonic()
            with self.link.lock:
                self.bank.tick_all(now - last)
            last = now

    def shutdown(self) -> None:
        self._shutdown = True
        self._scan_abort.set()
        self._live_stop.set()
        if self._scan_thread is not None:
            self._scan_thread.join(timeout=10.0)
        if self._live_thread is not None:
            self._live_thread.join(timeout=2.0)
        for thread in self._job_threads:
            thread.join(timeout=10.0)
        for buffer in self.buffers.values():
            buffer.close()

    def _recover_jobs(self) -> None:
        for path in sorted((self.data_dir / "retrievals").iterdir()):
            if (path / "manifest").is_file():
                self._jobs[path.name] = {"state": "done", "result_dir": str(path)}

    # -- session plumbing --------------------------------------------------------

    def login(self, user: str, password: str) -> dict:
        outcome = "ok"
        try:
            session = self.sessions.login(user, password)
            return {"token": session.token, "role": session.role, "user": session.user}
        except GratingscopeError as exc:
            outcome = f"rejected: {type(exc).__name__}"
            raise
        finally:
            self.history.append(user=user, action="login", target="service",
                                outcome=outcome)

    def read_session(self, token: Optional[str]):
        """Validate a token for read endpoints; log only rejections."""
        try:
            return self.sessions.validate(token)
        except AuthError:
            self.history.append(user="?", action="auth", target="service",
                                outcome="rejected: AuthError")
            raise

    def _require_control(self, session) -> None:
        with self._device_lock:
            holder = self._control_token
            if holder is not None:
                try:
                    holding_session = self.sessions.validate(holder)
                except AuthError:
                    holding_session = None
                if holding_session is None or holder == session.token:
                    holder = None if holding_session is None else holder
                elif session.role == ROLE_ADMIN:
                    holder = None  # admin takeover
                else:
                    raise ControlHeldError(
                        f"device control is held by {holding_session.user!r}"
                    )
            if holder is None or holder != session.token:
                self._control_token = session.token

    @_mutating("logout")
    def logout(self, session) -> dict:
        with self._device_lock:
            if self._control_token == session.token:
                self._control_token = None
        self.sessions.revoke(session.token)
        return {"status": "ok"}

    @_mutating("control_release", target="control")
    def control_release(self, session) -> dict:
        with self._device_lock:
            if self._control_token == session.token or session.role == ROLE_ADMIN:
                self._control_token = None
        return {"status": "ok"}

    # -- devices -------------------------------------------------------------

    def _resolve_stage(self, device: int, motor_type: str, axis: str) -> StageInfo:
        try:
            return self.config.resolve_stage(device, motor_type, axis)
        except ConfigError as exc:
            raise AddressError(str(exc)) from exc

    @_mutating("stage_command", target="stage")
    def stage_command(self, session, device: int, motor_type: str, axis: str,
                      action: str, value: Optional[float] = None) -> dict:
        self._require_control(session)
        if action not in _STAGE_ACTIONS:
            raise AddressError(f"unknown stage action {action!r}")
        stage = self._resolve_stage(device, motor_type, axis)
        with self._interlock:
            scan_running = self._scan_state["state"] == "running"
            if scan_running and action in _MOTION_ACTIONS:
                raise InterlockError("motion refused: a scan is running")
            if action == "stop" and scan_running:
                self._abort_scan_locked()
            if stage.motor_type == "piezo":
                return self._piezo_command(stage, action, value)
            return self._motor_command(stage, action, value,
                                       scan_running=scan_running)

    def _piezo_command(self, stage: StageInfo, action: str, value) -> dict:
        piezo = self.beamline.piezo
        if action == "move_rel":
            piezo.move(piezo.commanded_um + float(value))
        elif action == "move_abs":
            piezo.move(float(value))
        elif action == "zero":
            piezo.home(0.0)
        elif action in ("query", "stop"):
            pass
        else:
            raise DeviceError(f"action {action!r} is not supported by the piezo stage")
        return {
            "status": "ok",
            "position": piezo.commanded_um,
            "encoder": piezo.encoder_um,
            "unit": stage.unit,
        }

    def _motor_command(self, stage: StageInfo, action: str, value,
                       scan_running: bool) -> dict:
        kind = _STAGE_ACTIONS[action]
        cmd_value = None
        if kind in (CommandKind.MOVE_RELATIVE, CommandKind.MOVE_ABSOLUTE,
                    CommandKind.SET_VELOCITY):
            if value is None:
                raise DeviceError(f"action {action!r} needs a value")
            cmd_value = int(round(float(value) * stage.steps_per_unit))
        cmd = Command(kind, stage.axis, cmd_value)
        reply = self.link.execute(stage.device, cmd, scan_running)
        if reply.startswith("ERR="):
            raise DeviceError(f"controller {stage.device} replied {reply!r}")
        out = {"status": "ok", "raw_reply": reply, "unit": stage.unit}
        if kind is CommandKind.POSITION_QUERY:
            steps = int(reply[2:-1])
            out["position"] = steps / stage.steps_per_unit
            out["steps"] = steps
        return out

    @_mutating("tube_set", target="tube")
    def tube_set(self, session, on: bool, voltage_kv: Optional[float] = None,
                 current_ma: Optional[float] = None) -> dict:
        self._require_control(session)
        with self._interlock:
            if self._scan_state["state"] == "running":
                raise InterlockError("tube settings are locked while a scan is running")
            state = self.beamline.set_tube(on, voltage_kv, current_ma)
        return {"status": "ok", "on": state.on, "kv": state.voltage_kv,
                "ma": state.current_ma}

    # -- scans -------------------------------------------------------------------

    @_mutating("scan_start", target="scan")
    def scan_start(self, session, mode: str = "B", steps: int = 50,
                   frames_to_average: int = 30, exposure_s: float = 0.1,
                   seed: int = 0, name: Optional[str] = None,
                   roi: Optional[list] = None) -> dict:
        self._require_control(session)
        scan_roi = Roi(*roi) if roi else None
        config = ScanConfig(mode=mode, steps=steps, frames_to_average=frames_to_average,
                            exposure_s=exposure_s, seed=seed, roi=scan_roi)
        config = config.resolved(self.beamline.fringe.p2_equiv_um)
        if not self.beamline.tube.on:
            raise ScanError("tube must be on to scan")
        with self._interlock:
            if self._scan_state["state"] == "running":
                raise BusyError("a scan is already running")
            self._scan_counter += 1
            scan_id = name or f"scan-{self._scan_counter:04d}-{uuid.uuid4().hex[:6]}"
            out_dir = self.data_dir / "datasets" / scan_id
            if out_dir.exists():
                raise BusyError(f"dataset {scan_id!r} already exists")
            self._scan_abort.clear()
            self._scan_state = {
                "state": "running", "scan_id": scan_id, "step": None, "arm": None,
                "dataset": str(out_dir), "mode": config.mode, "steps": config.steps,
            }
            thread = threading.Thread(
                target=self._scan_worker, args=(config, out_dir, scan_id),
                daemon=True, name=f"scan-{scan_id}",
            )
            self._scan_thread = thread
            thread.start()
        return {"status": "running", "scan_id": scan_id, "dataset": str(out_dir)}

    def _scan_worker(self, config: ScanConfig, out_dir: Path, scan_id: str) -> None:
        pacing = self.config.service.scan_pacing_s

        def observer(event: dict) -> None:
            etype = event.get("type")
            if etype == "point":
                self.buffers["shift_curve"].publish({
                    "scan_id": scan_id, "arm": event["arm"], "step": event["step"],
                    "piezo_um": event["piezo_um"], "mean": event["mean"],
                })
            elif etype == "frame":
                self._publish_preview(scan_id, event)
                if pacing > 0:
                    time.sleep(pacing)
            else:
                payload = {"scan_id": scan_id, "event": etype}
                payload.update({k: v for k, v in event.items() if _jsonable(v) and k != "type"})
                self.buffers["scan_events"].publish(payload)
            if etype in ("point",):
                with self._interlock:
                    self._scan_state["step"] = event["step"]
                    self._scan_state["arm"] = event["arm"]

        try:
            if self.engine.maps is None:
                # first scan on this detector: measure dark offset and flat
                # field once, then reuse (frames are stored corrected)
                self.buffers["scan_events"].publish(
                    {"scan_id": scan_id, "event": "calibrating"})
                self.engine.measure_correction_maps()
            ds = self.engine.run_scan(config, out_dir=out_dir, observer=observer,
                                      abort_event=self._scan_abort)
            final = "aborted" if ds.incomplete else "completed"
        except Exception as exc:  # device fault: surface through the stream
            final = "error"
            self.buffers["scan_events"].publish({
                "scan_id": scan_id, "event": "error", "detail": str(exc),
            })
        with self._interlock:
            self._scan_state = {**self._scan_state, "state": final}

    def _publish_preview(self, scan_id: Optional[str], event: dict) -> None:
        now = time.monotonic()
        if now - self._last_preview < self.config.service.preview_interval_s:
            return
        self._last_preview = now
        frame = event["frame"]
        image = window_image(np.asarray(frame.pixels, dtype=np.float64), 1.0, 99.0)
        self.buffers["live_frames"].publish({
            "scan_id": scan_id,
            "arm": event.get("arm"),
            "step": event.get("step"),
            "width": int(image.shape[1]),
            "height": int(image.shape[0]),
            "data_b64": base64.b64encode(image.tobytes()).decode("ascii"),
        })

    def _abort_scan_locked(self) -> None:
        self._scan_abort.set()

    @_mutating("scan_abort", target="scan")
    def scan_abort(self, session) -> dict:
        with self._interlock:
            if self._scan_state["state"] != "running":
                return {"status": "idle"}
            self._abort_scan_locked()
        if self._scan_thread is not None:
            self._scan_thread.join(timeout=30.0)
        with self._interlock:
            return {"status": self._scan_state["state"],
                    "scan_id": self._scan_state["scan_id"]}

    def scan_status(self, token: Optional[str]) -> dict:
        self.read_session(token)
        with self._interlock:
            return dict(self._scan_state)

    # -- retrieval jobs ------------------------------------------------------------

    @_mutating("retrieval_submit", target="retrieval")
    def retrieval_submit(self, session, sample_path: str, reference_path: str,
                         roi: Optional[list] = None,
                         margin_rows: Optional[int] = None,
                         lo_pct: float = 1.0, hi_pct: float = 99.0) -> dict:
        sample_ds = load_dataset(sample_path)
        reference_ds = load_dataset(reference_path)
        # validate compatibility before the job starts
        if (sample_ds.width, sample_ds.height) != (reference_ds.width, reference_ds.height):
            raise RetrievalInputError("datasets have different frame dimensions")
        if sample_ds.steps != reference_ds.steps:
            raise RetrievalInputError(
                f"datasets have different step counts "
                f"({sample_ds.steps} vs {reference_ds.steps})"
            )
        scan_roi = Roi(*roi) if roi else None
        if scan_roi is not None:
            scan_roi.validate((sample_ds.height, sample_ds.width))
        job_id = f"job-{len(self._jobs) + 1:04d}-{uuid.uuid4().hex[:6]}"
        self._jobs[job_id] = {"state": "running", "result_dir": None}
        thread = threading.Thread(
            target=self._retrieval_worker,
            args=(job_id, sample_ds, reference_ds, scan_roi, margin_rows, lo_pct, hi_pct),
            daemon=True, name=job_id,
        )
        self._job_threads.append(thread)
        thread.start()
        return {"job_id": job_id, "state": "running"}

    def _retrieval_worker(self, job_id, sample_ds, reference_ds, roi, margin_rows,
                          lo_pct, hi_pct) -> None:
        try:
            result = run_retrieval(sample_ds, reference_ds, roi=roi,
                                   margin_rows=margin_rows)
            out_dir = self.data_dir / "retrievals" / job_id
            diag = {}
            for arm, stats in result.diagnostics.items():
                diag[f"{arm}-period-steps"] = repr(stats.period_steps)
                diag[f"{arm}-visibility"] = repr(stats.visibility)
                diag[f"{arm}-start-phase"] = repr(stats.start_phase)
            save_result_maps(out_dir, {
                "transmission": result.transmission.astype(np.float32),
                "dpc": result.dpc.astype(np.float32),
                "darkfield": result.darkfield.astype(np.float32),
                "visibility-ref": result.visibility_ref.astype(np.float32),
                "valid": result.valid.astype(np.float32),
            }, diag)
            for channel in ("transmission", "dpc", "darkfield"):
                image = window_image(getattr(result, channel), lo_pct, hi_pct,
                                     valid=result.valid)
                write_pgm(out_dir / f"{channel}.pgm", image)
            self._jobs[job_id] = {"state": "done", "result_dir": str(out_dir),
                                  "diagnostics": diag}
        except Exception as exc:
            self._jobs[job_id] = {"state": "error", "error": str(exc)}

    def retrieval_status(self, token: Optional[str], job_id: str) -> dict:
        self.read_session(token)
        job = self._jobs.get(job_id)
        if job is None:
            raise RetrievalInputError(f"unknown job {job_id!r}")
        return {"job_id": job_id, **job}

    def retrieval_preview(self, token: Optional[str], job_id: str, channel: str) -> bytes:
        self.read_session(token)
        job = self._jobs.get(job_id)
        if job is None or job.get("state") != "done":
            raise RetrievalInputError(f"job {job_id!r} has no result")
        path = Path(job["result_dir"]) / f"{channel}.pgm"
        if not path.is_file():
            raise RetrievalInputError(f"no preview for channel {channel!r}")
        return path.read_bytes()

    def retrieval_profile(self, token: Optional[str], job_id: str, channel: str,
                          x0: float, y0: float, x1: float, y1: float) -> dict:
        """Values along a segment of a result map (server-side profile tool)."""
        self.read_session(token)
        job = self._jobs.get(job_id)
        if job is None or job.get("state") != "done":
            raise RetrievalInputError(f"job {job_id!r} has no result")
        from ..dataset import load_result_maps

        maps, _ = load_result_maps(job["result_dir"])
        key = channel.replace("_", "-")
        if key not in maps:
            raise RetrievalInputError(f"unknown channel {channel!r}")
        grid = maps[key]
        h, w = grid.shape
        length = math.hypot(x1 - x0, y1 - y0)
        n = max(2, int(math.ceil(length)) + 1)
        xs = np.linspace(x0, x1, n)
        ys = np.linspace(y0, y1, n)
        ix = np.clip(np.rint(xs).astype(int), 0, w - 1)
        iy = np.clip(np.rint(ys).astype(int), 0, h - 1)
        return {
            "channel": channel,
            "positions": np.linspace(0.0, length, n).tolist(),
            "values": grid[iy, ix].tolist(),
        }

    # -- notes / history / datasets ------------------------------------------------

    @_mutating("note", target="notes")
    def add_note(self, session, text: str) -> dict:
        # free-text experimental notes ride on the history log
        return {"status": "ok", "text": text}

    def history_list(self, token: Optional[str], limit: int = 100) -> list[dict]:
        self.read_session(token)
        return [
            {"timestamp": e.timestamp, "user": e.user, "action": e.action,
             "target": e.target, "params": e.params, "outcome": e.outcome}
            for e in self.history.tail(limit)
        ]

    def history_stats(self, token: Optional[str]) -> dict:
        self.read_session(token)
        return self.history.stats_by_target()

    def datasets_list(self, token: Optional[str]) -> list[dict]:
        self.read_session(token)
        return self.dataset_index()

    def dataset_index(self) -> list[dict]:
        out = []
        root = self.data_dir / "datasets"
        for path in sorted(root.iterdir()):
            if not (path / "manifest").is_file():
                continue
            try:
                out.append(dataset_summary(path))
            except GratingscopeError as exc:
                out.append({"name": path.name, "path": str(path), "error": str(exc)})
        return out

    # -- live mode -------------------------------------------------------------

    @_mutating("detector_live", target="detector")
    def detector_live(self, session, on: bool) -> dict:
        self._require_control(session)
        if on:
            if self._live_thread is None or not self._live_thread.is_alive():
                self._live_stop.clear()
                self._live_thread = threading.Thread(target=self._live_worker,
                                                     daemon=True, name="live-view")
                self._live_thread.start()
        else:
            self._live_stop.set()
        return {"status": "ok", "live": on}

    _LIVE_SEED_SPACE = 0x11FE  # keeps live-view renders off the scan seed space

    def _live_worker(self) -> None:
        period = 1.0 / max(self.config.service.live_fps, 0.1)
        counter = 0
        while not self._live_stop.is_set() and not self._shutdown:
            with self._interlock:
                scanning = self._scan_state["state"] == "running"
            if not scanning:
                frame = self.beamline.render_frame(seed=(self._LIVE_SEED_SPACE, counter))
                counter += 1
                self._publish_preview(None, {"frame": frame, "arm": None, "step": None})
            time.sleep(period)

    # -- status -------------------------------------------------------------------

    def status(self, token: Optional[str]) -> dict:
        self.read_session(token)
        with self._interlock:
            scan = dict(self._scan_state)
        holder = None
        if self._control_token is not None:
            try:
                holder = self.sessions.validate(self._control_token).user
            except AuthError:
                holder = None
        return {
            "beamline": self.beamline.snapshot(),
            "scan": scan,
            "control_holder": holder,
            "kernel_backend": _kernels.BACKEND,
            "data_dir": str(self.data_dir),
        }

    def stream_buffer(self, channel: str) -> EventBuffer:
        if channel not in self.buffers:
            raise RetrievalInputError(f"unknown stream channel {channel!r}")
        return self.buffers[channel]
