import json
import threading
import time

import pytest
import requests

from gratingscope.config import SystemConfig
from gratingscope.service.auth import create_credential_file
from gratingscope.service.core import ControlService

pytestmark = pytest.mark.service


def make_config(data_dir, pacing=0.0, ttl=3600.0, buffer=4096) -> SystemConfig:
    cfg = SystemConfig()
    cfg.detector.width = 24
    cfg.detector.height = 24
    cfg.detector.dark_sigma = 0.0
    cfg.detector.shot_noise = False
    cfg.phantom.kind = "slab"
    cfg.phantom.margin = 6
    cfg.service.data_dir = str(data_dir)
    cfg.service.scan_pacing_s = pacing
    cfg.service.session_ttl_s = ttl
    cfg.service.stream_buffer = buffer
    cfg.service.login_cooldown_s = 0.5
    return cfg


def make_core(data_dir, **kw) -> ControlService:
    cfg = make_config(data_dir, **kw)
    create_credential_file(cfg.service.credentials_path(), [
        ("op", "secret", "operator"),
        ("op2", "secret2", "operator"),
        ("boss", "admsecret", "admin"),
    ])
    return ControlService(cfg, auto_tick=True)


class LiveServer:
    """uvicorn on an ephemeral port, driven from a background thread."""

    def __init__(self, core: ControlService):
        import uvicorn

        from gratingscope.service.app import create_app

        self.core = core
        config = uvicorn.Config(create_app(core), host="127.0.0.1", port=0,
                                log_level="error")
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)
        self.thread.start()
        deadline = time.time() + 10.0
        while not self.server.started:
            if time.time() > deadline:
                raise RuntimeError("uvicorn failed to start")
            time.sleep(0.01)
        self.port = self.server.servers[0].sockets[0].getsockname()[1]
        self.base = f"http://127.0.0.1:{self.port}"

    def stop(self):
        self.server.should_exit = True
        self.thread.join(timeout=5.0)
        self.core.shutdown()


@pytest.fixture(scope="module")
def live(tmp_path_factory):
    core = make_core(tmp_path_factory.mktemp("service-data"), pacing=0.005)
    server = LiveServer(core)
    yield server
    server.stop()


def login(live, user="op", password="secret"):
    r = requests.post(f"{live.base}/api/login",
                      json={"user": user, "password": password})
    r.raise_for_status()
    token = r.json()["token"]
    session = requests.Session()
    session.headers["Authorization"] = f"Bearer {token}"
    session.base = live.base
    session.token = token
    return session


def release_control(session, live):
    requests.post(f"{live.base}/api/control/release", headers=session.headers)


def wait_scan_done(session, live, timeout=30.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        state = session.get(f"{live.base}/api/scan/status").json()
        if state["state"] in ("completed", "aborted", "error", "idle"):
            return state
        time.sleep(0.02)
    raise TimeoutError("scan did not finish")


def read_sse(url, headers, want, timeout=30.0, stop_event=None):
    """Collect up to ``want`` data events from an SSE stream."""
    events = []
    with requests.get(url, headers=headers, stream=True, timeout=timeout) as r:
        current_id = None
        for raw in r.iter_lines(decode_unicode=True):
            if raw is None:
                continue
            if raw.startswith("id:"):
                current_id = int(raw[3:].strip())
            elif raw.startswith("data:") and current_id is not None:
                events.append((current_id, json.loads(raw[5:].strip())))
                current_id = None
                if len(events) >= want:
                    break
            elif raw.startswith("event: error"):
                events.append(("error", None))
                break
    return events


class TestAuth:
    def test_login_and_status(self, live):
        session = login(live)
        r = session.get(f"{live.base}/api/status")
        assert r.status_code == 200
        body = r.json()
        assert body["beamline"]["detector"]["width"] == 24

    def test_bad_password_is_401(self, live):
        r = requests.post(f"{live.base}/api/login",
                          json={"user": "op", "password": "wrong"})
        assert r.status_code == 401

    def test_unknown_user_indistinguishable(self, live):
        a = requests.post(f"{live.base}/api/login",
                          json={"user": "op", "password": "wrong"}).json()
        b = requests.post(f"{live.base}/api/login",
                          json={"user": "ghost", "password": "wrong"}).json()
        assert a["error"] == b["error"]
        assert a["detail"] == b["detail"]

    def test_rate_limit_after_failures(self, live):
        for _ in range(5):
            requests.post(f"{live.base}/api/login",
                          json={"user": "op2", "password": "bad"})
        r = requests.post(f"{live.base}/api/login",
                          json={"user": "op2", "password": "secret2"})
        assert r.status_code == 429
        time.sleep(0.6)  # cooldown configured to 0.5 s
        r = requests.post(f"{live.base}/api/login",
                          json={"user": "op2", "password": "secret2"})
        assert r.status_code == 200

    def test_missing_token_rejected_and_recorded(self, live):
        session = login(live)
        before = len(live.core.history)
        r = requests.get(f"{live.base}/api/status")
        assert r.status_code == 401
        assert len(live.core.history) == before + 1  # rejection is recorded

    def test_logout_invalidates(self, live):
        session = login(live)
        session.post(f"{live.base}/api/logout")
        r = session.get(f"{live.base}/api/status")
        assert r.status_code == 401


class TestStageCommands:
    def test_move_rel_emits_scaled_steps(self, live):
        session = login(live)
        try:
            before = len(live.core.link.emissions)
            r = session.post(f"{live.base}/api/stage/command", json={
                "device": 1, "motor_type": "translation", "axis": "X",
                "action": "move_rel", "value": 1.0,
            })
            assert r.status_code == 200, r.text
            emitted = live.core.link.emissions[before:]
            assert any(e.data == b"X:1000/" for e in emitted)  # 1 mm * 1000 steps/mm
        finally:
            release_control(session, live)

    def test_query_converts_units(self, live):
        session = login(live)
        try:
            session.post(f"{live.base}/api/stage/command", json={
                "device": 2, "motor_type": "translation", "axis": "Y",
                "action": "move_abs", "value": 0.25,
            })
            deadline = time.time() + 5.0
            while time.time() < deadline:
                r = session.post(f"{live.base}/api/stage/command", json={
                    "device": 2, "motor_type": "translation", "axis": "Y",
                    "action": "query",
                })
                if r.status_code == 200 and r.json().get("position") == pytest.approx(0.25):
                    break
                time.sleep(0.05)
            assert r.json()["position"] == pytest.approx(0.25)
            assert r.json()["steps"] == 250
        finally:
            release_control(session, live)

    def test_piezo_reply_carries_encoder(self, live):
        session = login(live)
        try:
            r = session.post(f"{live.base}/api/stage/command", json={
                "device": 8, "motor_type": "piezo", "axis": "X",
                "action": "move_abs", "value": 3.5,
            })
            body = r.json()
            assert body["encoder"] == pytest.approx(3.5)
            assert body["unit"] == "um"
            r = session.post(f"{live.base}/api/stage/command", json={
                "device": 1, "motor_type": "translation", "axis": "X",
                "action": "query",
            })
            assert "encoder" not in r.json()  # only the piezo has an encoder
            session.post(f"{live.base}/api/stage/command", json={
                "device": 8, "motor_type": "piezo", "axis": "X",
                "action": "zero",
            })
        finally:
            release_control(session, live)

    def test_unknown_device_is_address_error(self, live):
        session = login(live)
        try:
            r = session.post(f"{live.base}/api/stage/command", json={
                "device": 9, "motor_type": "translation", "axis": "X",
                "action": "query",
            })
            assert r.status_code == 404
            assert r.json()["error"] == "AddressError"
        finally:
            release_control(session, live)

    def test_second_session_blocked_until_release(self, live):
        first = login(live)
        second = login(live, "op2", "secret2")
        try:
            first.post(f"{live.base}/api/stage/command", json={
                "device": 1, "motor_type": "translation", "axis": "Z",
                "action": "query",
            })
            r = second.post(f"{live.base}/api/stage/command", json={
                "device": 1, "motor_type": "translation", "axis": "Z",
                "action": "query",
            })
            assert r.status_code == 409
            assert r.json()["error"] == "ControlHeldError"
            release_control(first, live)
            r = second.post(f"{live.base}/api/stage/command", json={
                "device": 1, "motor_type": "translation", "axis": "Z",
                "action": "query",
            })
            assert r.status_code == 200
        finally:
            release_control(second, live)
            release_control(first, live)

    def test_admin_takes_over(self, live):
        operator = login(live)
        admin = login(live, "boss", "admsecret")
        try:
            operator.post(f"{live.base}/api/stage/command", json={
                "device": 1, "motor_type": "translation", "axis": "X",
                "action": "query",
            })
            r = admin.post(f"{live.base}/api/stage/command", json={
                "device": 1, "motor_type": "translation", "axis": "X",
                "action": "query",
            })
            assert r.status_code == 200
        finally:
            release_control(admin, live)
            release_control(operator, live)


class TestScan:
    def run_scan(self, session, live, **kw):
        body = {"mode": "B", "steps": 4, "frames_to_average": 1, "seed": 1}
        body.update(kw)
        session.post(f"{live.base}/api/tube", json={"on": True, "kv": 45, "ma": 22.5})
        r = session.post(f"{live.base}/api/scan/start", json=body)
        assert r.status_code == 200, r.text
        return r.json()

    def test_scan_lifecycle(self, live):
        session = login(live)
        try:
            started = self.run_scan(session, live)
            state = wait_scan_done(session, live)
            assert state["state"] == "completed"
            datasets = session.get(f"{live.base}/api/datasets").json()
            names = [d["name"] for d in datasets]
            assert started["scan_id"] in names
        finally:
            release_control(session, live)

    def test_interlock_blocks_moves_during_scan(self, live):
        session = login(live)
        try:
            self.run_scan(session, live, steps=8, frames_to_average=2)
            r = session.post(f"{live.base}/api/stage/command", json={
                "device": 1, "motor_type": "translation", "axis": "X",
                "action": "move_rel", "value": 1.0,
            })
            assert r.status_code == 409
            assert r.json()["error"] == "InterlockError"
            # stop is allowed and aborts the scan
            r = session.post(f"{live.base}/api/stage/command", json={
                "device": 1, "motor_type": "translation", "axis": "X",
                "action": "stop",
            })
            assert r.status_code == 200
            state = wait_scan_done(session, live)
            assert state["state"] == "aborted"
        finally:
            release_control(session, live)

    def test_busy_on_concurrent_start(self, live):
        session = login(live)
        try:
            self.run_scan(session, live, steps=8, frames_to_average=2)
            r = session.post(f"{live.base}/api/scan/start", json={
                "mode": "B", "steps": 4, "frames_to_average": 1,
            })
            assert r.status_code == 409
            assert r.json()["error"] == "BusyError"
            session.post(f"{live.base}/api/scan/abort")
            wait_scan_done(session, live)
        finally:
            release_control(session, live)

    def test_abort_without_scan_is_idle_noop(self, live):
        session = login(live)
        try:
            wait_scan_done(session, live)
            r = session.post(f"{live.base}/api/scan/abort")
            assert r.json()["status"] in ("idle", "completed", "aborted")
        finally:
            release_control(session, live)

    def test_shift_curve_stream_is_ordered_and_complete(self, live):
        session = login(live)
        try:
            headers = dict(session.headers)
            before = live.core.buffers["shift_curve"].last_seq
            started = self.run_scan(session, live, steps=5, seed=3)
            events = read_sse(
                f"{live.base}/api/stream/shift_curve?since={before}", headers,
                want=10,
            )
            wait_scan_done(session, live)
            mine = [(s, p) for s, p in events if p["scan_id"] == started["scan_id"]]
            per_arm = {}
            for _, p in mine:
                per_arm.setdefault(p["arm"], []).append(p["step"])
            assert per_arm["reference"] == list(range(5))
            assert per_arm["sample"] == list(range(5))
            seqs = [s for s, _ in mine]
            assert seqs == sorted(seqs)
        finally:
            release_control(session, live)

    def test_stream_resume_by_sequence(self, live):
        session = login(live)
        try:
            headers = dict(session.headers)
            before = live.core.buffers["shift_curve"].last_seq
            self.run_scan(session, live, steps=5, seed=4)
            first = read_sse(f"{live.base}/api/stream/shift_curve?since={before}",
                             headers, want=3)
            last_seen = first[-1][0]
            rest = read_sse(f"{live.base}/api/stream/shift_curve?since={last_seen}",
                            headers, want=7)
            wait_scan_done(session, live)
            seqs = [s for s, _ in first] + [s for s, _ in rest]
            assert seqs == sorted(seqs)
            assert len(set(seqs)) == len(seqs)  # no duplicates
            assert rest[0][0] == last_seen + 1  # no gap at the splice
        finally:
            release_control(session, live)

    def test_live_frames_heartbeat_when_idle(self, live):
        session = login(live)
        buffer_seq = live.core.buffers["live_frames"].last_seq
        with requests.get(
            f"{live.base}/api/stream/live_frames?since={buffer_seq}",
            headers=session.headers, stream=True, timeout=10,
        ) as r:
            for raw in r.iter_lines(decode_unicode=True):
                if raw and raw.startswith("event: heartbeat"):
                    break
            else:
                pytest.fail("no heartbeat received")


class TestRetrievalJob:
    def make_datasets(self, session, live, steps=5):
        session.post(f"{live.base}/api/tube", json={"on": True, "kv": 45, "ma": 22.5})
        r = session.post(f"{live.base}/api/scan/start", json={
            "mode": "B", "steps": steps, "frames_to_average": 1, "seed": 11,
        })
        assert r.status_code == 200, r.text
        path = r.json()["dataset"]
        wait_scan_done(session, live)
        return path

    def test_job_end_to_end(self, live):
        session = login(live)
        try:
            path = self.make_datasets(session, live)
            r = session.post(f"{live.base}/api/retrieval", json={
                "sample_path": path, "reference_path": path,
            })
            assert r.status_code == 200, r.text
            job_id = r.json()["job_id"]
            deadline = time.time() + 30
            while time.time() < deadline:
                state = session.get(f"{live.base}/api/retrieval/{job_id}").json()
                if state["state"] != "running":
                    break
                time.sleep(0.05)
            assert state["state"] == "done", state
            preview = session.get(
                f"{live.base}/api/retrieval/{job_id}/preview/transmission")
            assert preview.content.startswith(b"P5\n")
            profile = session.get(
                f"{live.base}/api/retrieval/{job_id}/profile",
                params={"channel": "transmission", "x0": 0, "y0": 12, "x1": 23, "y1": 12},
            ).json()
            assert len(profile["values"]) >= 24
        finally:
            release_control(session, live)

    def test_incompatible_steps_rejected_before_start(self, live):
        session = login(live)
        try:
            a = self.make_datasets(session, live, steps=5)
            b = self.make_datasets(session, live, steps=6)
            r = session.post(f"{live.base}/api/retrieval", json={
                "sample_path": a, "reference_path": b,
            })
            assert r.status_code == 400
            assert "step" in r.json()["detail"]
        finally:
            release_control(session, live)

    def test_roi_outside_frame_rejected(self, live):
        session = login(live)
        try:
            path = self.make_datasets(session, live)
            r = session.post(f"{live.base}/api/retrieval", json={
                "sample_path": path, "reference_path": path, "roi": [20, 20, 10, 10],
            })
            assert r.status_code == 400
        finally:
            release_control(session, live)


class TestHistoryAudit:
    def test_each_post_appends_exactly_one_entry(self, live):
        session = login(live)  # the login itself appends one
        try:
            before = len(live.core.history)
            calls = 0
            session.post(f"{live.base}/api/tube", json={"on": True}); calls += 1
            session.post(f"{live.base}/api/notes", json={"text": "specimen mounted"}); calls += 1
            session.post(f"{live.base}/api/stage/command", json={
                "device": 9, "motor_type": "translation", "axis": "X",
                "action": "query"}); calls += 1  # fails, still exactly one entry
            session.post(f"{live.base}/api/tube", json={"on": False}); calls += 1
            session.get(f"{live.base}/api/history")          # reads append nothing
            session.get(f"{live.base}/api/datasets")
            session.get(f"{live.base}/api/status")
            assert len(live.core.history) == before + calls
        finally:
            release_control(session, live)

    def test_note_visible_in_history(self, live):
        session = login(live)
        session.post(f"{live.base}/api/notes", json={"text": "fish sample #3"})
        entries = session.get(f"{live.base}/api/history?limit=10").json()
        notes = [e for e in entries if e["action"] == "note"]
        assert notes and notes[-1]["params"]["text"] == "fish sample #3"

    def test_stats_by_target(self, live):
        session = login(live)
        stats = session.get(f"{live.base}/api/history/stats").json()
        assert "service" in stats
        assert stats["service"]["calls"] >= 1


class TestSessionExpiry:
    def test_expired_token_rejected_and_recorded(self, tmp_path):
        core = make_core(tmp_path / "ttl-data", ttl=0.05)
        try:
            token = core.login("op", "secret")["token"]
            time.sleep(0.1)
            before = len(core.history)
            with pytest.raises(Exception) as info:
                core.status(token)
            assert "expired" in str(info.value)
            assert len(core.history) == before + 1  # the rejection is audited
        finally:
            core.shutdown()


class TestRestartRecovery:
    def test_history_and_datasets_survive_restart(self, tmp_path):
        core = make_core(tmp_path / "data")
        token = core.login("op", "secret")["token"]
        core.tube_set(token, on=True)
        core.scan_start(token, mode="B", steps=4, frames_to_average=1, seed=5,
                        name="restartable")
        deadline = time.time() + 30
        while core.scan_status(token)["state"] == "running" and time.time() < deadline:
            time.sleep(0.02)
        core.add_note(token, text="before restart")
        history_before = len(core.history)
        index_before = core.dataset_index()
        core.shutdown()

        reborn = ControlService(make_config(tmp_path / "data"), auto_tick=False)
        assert len(reborn.history) == history_before
        assert reborn.dataset_index() == index_before
        assert any(d["name"] == "restartable" for d in reborn.dataset_index())
        reborn.shutdown()
